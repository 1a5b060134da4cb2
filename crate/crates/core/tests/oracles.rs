//! Library results checked against independently built references: a
//! calendar library for epoch conversion, hand-rolled HMAC and base64url,
//! published test vectors, and an expansion-based topic matcher.

mod common;

use std::collections::BTreeSet;

use authbench::jws::{
    base64url_decode, base64url_encode, compact_serialize, parse_compact, sign, verify_signature, Algorithm, ClaimsSet,
    JoseHeader, SigningKey, VerificationKey,
};
use authbench::mqtt::{decode_remaining_length, encode_remaining_length, filter_covers};
use chrono::{TimeZone, Utc};
use proptest::prelude::*;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// --- token example ------------------------------------------------------------------

fn example_instants() -> (i64, i64) {
    let iat = Utc.with_ymd_and_hms(2018, 8, 21, 10, 5, 50).unwrap().timestamp();
    let exp = Utc.with_ymd_and_hms(2018, 8, 21, 12, 5, 50).unwrap().timestamp();
    (iat, exp)
}

#[test]
fn example_instants_match_calendar() {
    let (iat, exp) = example_instants();
    assert_eq!(iat, 1_534_845_950);
    assert_eq!(exp, 1_534_853_150);
    assert_eq!(
        Utc.timestamp_opt(iat, 0).unwrap().to_rfc3339(),
        "2018-08-21T10:05:50+00:00"
    );
    assert_eq!(exp - iat, 2 * 3600);
}

#[test]
fn blueberry_token_matches_hand_built_token() {
    let (iat, exp) = example_instants();
    let mut claims = ClaimsSet::new(iat, exp).unwrap();
    claims.iss = Some("SiT Cafe Elektro".into());
    claims.sub = Some("free lunch".into());
    let token = sign(
        JoseHeader::new(Algorithm::Hs256),
        claims,
        &SigningKey::hs256(b"blueberry".to_vec()),
    )
    .unwrap();
    let compact = compact_serialize(&token);

    let header = common::ref_base64url(br#"{"alg":"HS256","typ":"JWT"}"#);
    let payload = common::ref_base64url(
        format!(r#"{{"iss":"SiT Cafe Elektro","sub":"free lunch","iat":{iat},"exp":{exp}}}"#).as_bytes(),
    );
    let signing_input = format!("{header}.{payload}");
    let mac = common::ref_hmac_sha256(b"blueberry", signing_input.as_bytes());
    assert_eq!(compact, format!("{signing_input}.{}", common::ref_base64url(&mac)));

    let parsed = parse_compact(&compact).unwrap();
    assert!(verify_signature(
        &parsed,
        &VerificationKey::hs256(b"blueberry".to_vec())
    ));
    for wrong in [&b"blueberrY"[..], b"", b"blueberry ", b"strawberry"] {
        assert!(!verify_signature(&parsed, &VerificationKey::hs256(wrong.to_vec())));
    }
}

// --- published vectors ----------------------------------------------------------------

#[test]
fn hmac_matches_rfc4231_case_2() {
    let expected = "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843";
    assert_eq!(
        hex(&common::ref_hmac_sha256(b"Jefe", b"what do ya want for nothing?")),
        expected
    );
    let key = SigningKey::hs256(b"Jefe".to_vec());
    assert_eq!(hex(&key.sign_bytes(b"what do ya want for nothing?")), expected);
}

#[test]
fn hmac_matches_rfc4231_case_6_long_key() {
    let key = vec![0xaa; 131];
    let msg = b"Test Using Larger Than Block-Size Key - Hash Key First";
    let expected = "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54";
    assert_eq!(hex(&common::ref_hmac_sha256(&key, msg)), expected);
    assert_eq!(hex(&SigningKey::hs256(key).sign_bytes(msg)), expected);
}

#[test]
fn remaining_length_table() {
    let table: [(u32, &[u8]); 8] = [
        (0, &[0x00]),
        (127, &[0x7F]),
        (128, &[0x80, 0x01]),
        (16_383, &[0xFF, 0x7F]),
        (16_384, &[0x80, 0x80, 0x01]),
        (2_097_151, &[0xFF, 0xFF, 0x7F]),
        (2_097_152, &[0x80, 0x80, 0x80, 0x01]),
        (268_435_455, &[0xFF, 0xFF, 0xFF, 0x7F]),
    ];
    for (value, bytes) in table {
        assert_eq!(encode_remaining_length(value as usize).unwrap(), bytes, "{value}");
        assert_eq!(decode_remaining_length(bytes).unwrap(), (value as usize, bytes.len()));
    }
    assert!(encode_remaining_length(268_435_456).is_err());
}

#[test]
fn base64url_rfc4648_vectors() {
    for (plain, encoded) in [
        ("", ""),
        ("f", "Zg"),
        ("fo", "Zm8"),
        ("foo", "Zm9v"),
        ("foob", "Zm9vYg"),
        ("fooba", "Zm9vYmE"),
        ("foobar", "Zm9vYmFy"),
    ] {
        assert_eq!(base64url_encode(plain.as_bytes()), encoded);
        assert_eq!(common::ref_base64url(plain.as_bytes()), encoded);
        assert_eq!(base64url_decode(encoded).unwrap(), plain.as_bytes());
    }
}

proptest! {
    #[test]
    fn base64url_agrees_with_reference(data in proptest::collection::vec(any::<u8>(), 0..200)) {
        let encoded = base64url_encode(&data);
        prop_assert_eq!(&encoded, &common::ref_base64url(&data));
        prop_assert_eq!(base64url_decode(&encoded).unwrap(), data);
    }

    #[test]
    fn hs256_agrees_with_reference(key in proptest::collection::vec(any::<u8>(), 0..100), msg in proptest::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(SigningKey::hs256(key.clone()).sign_bytes(&msg), common::ref_hmac_sha256(&key, &msg).to_vec());
    }
}

// --- topic matching by expansion -------------------------------------------------------

#[test]
fn topic_matches_agrees_with_expansion() {
    assert_eq!(common::all_topics(4).len(), 3 + 9 + 27 + 81);
    let disagreements = common::matcher_disagreements();
    assert!(
        disagreements.is_empty(),
        "{} disagreements, first {:?}",
        disagreements.len(),
        disagreements.first()
    );
}

#[test]
fn filter_covers_agrees_with_expansion_subsets() {
    // one level deeper than the longest filter so `#` always has room to differ
    let filters = common::all_filters();
    let sets: Vec<BTreeSet<String>> = filters.iter().map(|f| common::expand(f, 5)).collect();
    let mut disagreements = Vec::new();
    for (i, allowed) in filters.iter().enumerate() {
        for (j, requested) in filters.iter().enumerate() {
            if filter_covers(allowed, requested) != sets[j].is_subset(&sets[i]) {
                disagreements.push((allowed.clone(), requested.clone()));
            }
        }
    }
    assert!(
        disagreements.is_empty(),
        "{} disagreements, first {:?}",
        disagreements.len(),
        disagreements.first()
    );
}

#[test]
fn hmac_keys_equal_after_zero_padding_are_the_same_key() {
    let with_nul = b"blueberry\0".to_vec();
    let msg = b"header.payload";
    assert_eq!(
        common::ref_hmac_sha256(b"blueberry", msg),
        common::ref_hmac_sha256(&with_nul, msg)
    );
    assert_eq!(
        SigningKey::hs256(with_nul).sign_bytes(msg),
        SigningKey::hs256(b"blueberry".to_vec()).sign_bytes(msg)
    );
}
