use std::net::Ipv4Addr;

use funcmac::acl::{match_resource, Resource};
use funcmac::policy::{
    parse_policy, serialize_policy, AccessPriv, FunctionId, Ipv4Prefix, Policy, Protocol,
    ResourcePattern, Rule, Subject,
};
use proptest::prelude::*;

fn arb_subject() -> impl Strategy<Value = Subject> {
    prop_oneof![
        1 => Just(Subject::Default),
        4 => "[a-z]{1,6}(\\.[a-z_]{1,6}){1,2}".prop_map(|s| Subject::Function(FunctionId::new(s).unwrap())),
    ]
}

fn arb_path() -> impl Strategy<Value = String> {
    (
        prop::collection::vec("[a-zA-Z0-9_.-]{1,8}", 1..5),
        any::<bool>(),
    )
        .prop_filter_map("dot components", |(parts, dir)| {
            if parts.iter().any(|p| p == "." || p == "..") {
                return None;
            }
            let mut s = format!("/{}", parts.join("/"));
            if dir {
                s.push('/');
            }
            Some(s)
        })
}

fn arb_proto() -> impl Strategy<Value = Protocol> {
    prop::sample::select(vec![
        Protocol::Tcp,
        Protocol::Udp,
        Protocol::Raw,
        Protocol::Unix,
    ])
}

fn arb_prefix() -> impl Strategy<Value = Ipv4Prefix> {
    (any::<u32>(), 0u8..=32).prop_map(|(a, len)| {
        let mask = if len == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(len))
        };
        Ipv4Prefix::new(Ipv4Addr::from(a & mask), len).unwrap()
    })
}

fn arb_rule() -> impl Strategy<Value = Rule> {
    let privs = prop::sample::select(vec![AccessPriv::Read, AccessPriv::ReadWrite]);
    (
        arb_subject(),
        0u8..3,
        arb_path(),
        arb_prefix(),
        prop::option::of(arb_proto()),
        arb_proto(),
        privs,
    )
        .prop_map(|(subject, kind, path, prefix, proto, bare, privs)| {
            let resource = match kind {
                0 => ResourcePattern::fs(&path).unwrap(),
                1 => ResourcePattern::NetDest { prefix, proto },
                _ if subject == Subject::Default => ResourcePattern::NetProto(bare),
                _ => ResourcePattern::NetDest {
                    prefix,
                    proto: Some(bare),
                },
            };
            Rule::new(subject, resource, privs)
        })
}

fn arb_policy() -> impl Strategy<Value = Policy> {
    prop::collection::vec(arb_rule(), 0..20).prop_map(|rules| {
        let mut seen = std::collections::HashSet::new();
        Policy::new(
            rules
                .into_iter()
                .filter(|r| seen.insert((r.subject.clone(), r.resource.clone())))
                .collect(),
        )
    })
}

proptest! {
    #[test]
    fn parser_is_total_and_locates_errors(text in "(([a-z.#/ 0-9rw]|\\n|default|network|tcp|\\.\\.)){0,120}") {
        match parse_policy(&text) {
            Ok(p) => {
                let again = parse_policy(&serialize_policy(&p)).unwrap();
                prop_assert_eq!(again, p);
            }
            Err(e) => {
                let lines = text.lines().count().max(1);
                prop_assert!(e.line() >= 1 && e.line() <= lines, "{} of {}", e, lines);
            }
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(text in ".{0,200}") {
        let _ = parse_policy(&text);
    }

    #[test]
    fn serialize_parse_roundtrip(p in arb_policy()) {
        let text = serialize_policy(&p);
        let back = parse_policy(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(serialize_policy(&back), text);
    }

    #[test]
    fn error_line_points_at_the_bad_rule(p in arb_policy(), at in any::<prop::sample::Index>()) {
        let mut lines: Vec<String> = serialize_policy(&p).lines().map(str::to_string).collect();
        let pos = at.index(lines.len() + 1);
        lines.insert(pos, "m.f relative/path r".to_string());
        let e = parse_policy(&lines.join("\n")).unwrap_err();
        prop_assert_eq!(e.line(), pos + 1);
    }

    #[test]
    fn prefix_match_agrees_with_bitwise_oracle(
        net in any::<u32>(), len in 0u8..=32, addr in any::<u32>(),
        proto in arb_proto(), want in prop::option::of(arb_proto()),
    ) {
        let masked = if len == 0 { 0 } else { net & (u32::MAX << (32 - u32::from(len))) };
        let prefix = Ipv4Prefix::new(Ipv4Addr::from(masked), len).unwrap();
        // the oracle compares the top `len` bits one at a time
        let same_bits = (0..len).all(|i| (addr >> (31 - i)) & 1 == (masked >> (31 - i)) & 1);
        let pattern = ResourcePattern::NetDest { prefix, proto: want };
        let res = Resource::net(proto, Ipv4Addr::from(addr));
        prop_assert_eq!(prefix.contains(Ipv4Addr::from(addr)), same_bits);
        prop_assert_eq!(
            match_resource(&res, &pattern),
            same_bits && want.is_none_or(|w| w == proto)
        );
    }

    #[test]
    fn host_bits_are_rejected(net in any::<u32>(), len in 0u8..32) {
        let host_mask = u32::MAX >> len;
        prop_assume!(net & host_mask != 0);
        prop_assert!(Ipv4Prefix::new(Ipv4Addr::from(net), len).is_err());
        let text = format!("m.f network {}/{}\n", Ipv4Addr::from(net), len);
        prop_assert_eq!(parse_policy(&text).unwrap_err().line(), 1);
    }

    #[test]
    fn directory_rules_cover_descendants(dir in arb_path(), rest in "[a-z]{1,6}(/[a-z]{1,6}){0,3}") {
        let dir = if dir.ends_with('/') { dir } else { format!("{dir}/") };
        let pattern = ResourcePattern::fs(&dir).unwrap();
        let child = format!("{dir}{rest}");
        prop_assert!(match_resource(&Resource::file(child), &pattern));
        prop_assert!(match_resource(&Resource::file(dir.trim_end_matches('/')), &pattern));
        let sibling = format!("{}x/{rest}", dir.trim_end_matches('/'));
        prop_assert!(!match_resource(&Resource::file(sibling), &pattern));
    }
}
