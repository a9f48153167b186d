# skills/weather.py
