use proptest::prelude::*;

use ubfsim::directory::{GroupId, UserId};
use ubfsim::ident::{
    decode_query, decode_response, encode_query, encode_response, DecodeError, ErrorCode, IdentQuery, IdentResponse,
    MAX_LINE_LEN,
};
use ubfsim::net::Proto;

fn addr() -> impl Strategy<Value = String> {
    "[A-Za-z0-9._:-]{1,64}"
}

fn query() -> impl Strategy<Value = IdentQuery> {
    (prop_oneof![Just(Proto::Tcp), Just(Proto::Udp)], addr(), any::<u16>(), addr(), any::<u16>()).prop_map(
        |(proto, client_ip, client_port, server_ip, server_port)| IdentQuery {
            proto,
            client_ip,
            client_port,
            server_ip,
            server_port,
        },
    )
}

fn response() -> impl Strategy<Value = IdentResponse> {
    prop_oneof![
        (any::<u32>(), any::<u32>(), "[a-z_][a-z0-9_-]{0,31}")
            .prop_map(|(u, g, username)| IdentResponse::Ok { uid: UserId(u), egid: GroupId(g), username }),
        prop::sample::select(ErrorCode::ALL.to_vec()).prop_map(IdentResponse::Err),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn query_round_trip(q in query()) {
        let line = encode_query(&q).unwrap();
        prop_assert!(line.len() <= MAX_LINE_LEN);
        prop_assert_eq!(decode_query(&line).unwrap(), q);
    }

    #[test]
    fn response_round_trip(r in response()) {
        let line = encode_response(&r).unwrap();
        prop_assert_eq!(decode_response(&line).unwrap(), r);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode_query(&bytes);
        let _ = decode_response(&bytes);
    }

    #[test]
    fn accepted_lines_are_canonical(line in "(UBFIDENT/1|OK|ERR) [A-Z0-9 .:-]{0,40}\n") {
        if let Ok(q) = decode_query(line.as_bytes()) {
            prop_assert_eq!(encode_query(&q).unwrap(), line.as_bytes());
        }
        if let Ok(r) = decode_response(line.as_bytes()) {
            prop_assert_eq!(encode_response(&r).unwrap(), line.as_bytes());
        }
    }
}

#[test]
fn golden_lines() {
    let q = IdentQuery {
        proto: Proto::Tcp,
        client_ip: "10.0.0.1".into(),
        client_port: 40000,
        server_ip: "10.0.0.2".into(),
        server_port: 8888,
    };
    assert_eq!(encode_query(&q).unwrap(), b"UBFIDENT/1 TCP 10.0.0.1 40000 10.0.0.2 8888\n");
    let ok = IdentResponse::Ok { uid: UserId(1001), egid: GroupId(20000), username: "alice".into() };
    assert_eq!(encode_response(&ok).unwrap(), b"OK 1001 20000 alice\n");
    assert_eq!(encode_response(&IdentResponse::Err(ErrorCode::NoSocket)).unwrap(), b"ERR NO-SOCKET\n");
    assert_eq!(
        encode_response(&IdentResponse::Err(ErrorCode::UnsupportedProto)).unwrap(),
        b"ERR UNSUPPORTED-PROTO\n"
    );
}

#[test]
fn malformed_lines() {
    let cases: &[(&[u8], fn(&DecodeError) -> bool)] = &[
        (b"UBFIDENT/1 TCP a 1 b 2", |e| matches!(e, DecodeError::Unterminated)),
        (b"UBFIDENT/1 TCP a 1 b 2\r\n", |e| matches!(e, DecodeError::BadBytes)),
        (b"UBFIDENT/1 TCP a 01 b 2\n", |e| matches!(e, DecodeError::BadPort(_))),
        (b"UBFIDENT/1 TCP a 65536 b 2\n", |e| matches!(e, DecodeError::BadPort(_))),
        (b"UBFIDENT/1  TCP a 1 b 2\n", |e| matches!(e, DecodeError::FieldCount { .. })),
        (b"UBFIDENT/2 TCP a 1 b 2\n", |e| matches!(e, DecodeError::BadVersion)),
        (b"UBFIDENT/1 SCTP a 1 b 2\n", |e| matches!(e, DecodeError::UnsupportedProto(_))),
        (b"UBFIDENT/1 tcp a 1 b 2\n", |e| matches!(e, DecodeError::BadToken(_))),
    ];
    for (line, check) in cases {
        let err = decode_query(line).unwrap_err();
        assert!(check(&err), "{:?} gave {err:?}", String::from_utf8_lossy(line));
    }
    let long = format!("UBFIDENT/1 TCP {} 1 b 2\n", "a".repeat(300));
    assert_eq!(decode_query(long.as_bytes()), Err(DecodeError::TooLong));
    assert!(decode_response(b"OK 4294967296 1 alice\n").is_err());
    assert!(decode_response(b"OK 1 1 Alice\n").is_err());
    assert!(decode_response(b"ERR NOPE\n").is_err());
}
