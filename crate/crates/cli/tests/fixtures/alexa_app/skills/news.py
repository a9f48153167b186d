# skills/news.py
