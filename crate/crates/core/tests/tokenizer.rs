use proptest::prelude::*;
use serde_json::json;

use relpatch::fixture;
use relpatch::tokenizer::{load_tokenizer, FixtureTokenizer, Tokenizer};

/// The GPT-2 byte-to-character table, written out independently.
fn byte_chars() -> Vec<char> {
    let mut bs: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec![' '; 256];
    for (b, c) in bs.into_iter().zip(cs) {
        table[b as usize] = char::from_u32(c).unwrap();
    }
    table
}

fn tokenizer_json() -> serde_json::Value {
    let table = byte_chars();
    let mut vocab = serde_json::Map::new();
    for (b, c) in table.iter().enumerate() {
        vocab.insert(c.to_string(), json!(b));
    }
    let merges = [("y", "e"), ("ye", "s"), ("Ġ", "yes"), ("n", "o"), ("Ġ", "no"), ("Ġ", "t"), ("h", "e"), ("Ġt", "he")];
    let mut next = 256;
    for (a, b) in merges {
        vocab.insert(format!("{a}{b}"), json!(next));
        next += 1;
    }
    json!({
        "added_tokens": [{"id": 400, "content": "<|begin_of_text|>", "special": true}],
        "pre_tokenizer": {"type": "ByteLevel", "add_prefix_space": false},
        "model": {
            "type": "BPE",
            "vocab": vocab,
            "merges": merges.iter().map(|(a, b)| format!("{a} {b}")).collect::<Vec<_>>(),
        }
    })
}

#[test]
fn fixture_round_trips_known_strings() {
    let tok = FixtureTokenizer::standard();
    let yes = tok.encode("yes").unwrap();
    assert_eq!(yes.len(), 1);
    assert_eq!(tok.decode(&yes).unwrap(), "yes");
    assert!(tok.encode("").unwrap().is_empty());
    assert_eq!(tok.decode(&[]).unwrap(), "");
    let s = "Does the passage answer the query?";
    assert_eq!(tok.decode(&tok.encode(s).unwrap()).unwrap(), s);
}

#[test]
fn planted_lexicon_tokenizes_words_as_single_tokens() {
    let tok = fixture::tokenizer();
    let ids = tok.encode("apple fern RIVER").unwrap();
    assert_eq!(ids.len(), 3);
    assert_eq!(tok.decode(&ids[1..2]).unwrap(), " fern");
    let ids = tok.encode("\nDocument 2:").unwrap();
    assert_eq!(ids.len(), 1);
}

#[test]
fn tokenizer_json_loads_and_merges() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tokenizer.json");
    std::fs::write(&path, tokenizer_json().to_string()).unwrap();
    let tok = load_tokenizer(&path).unwrap();
    assert_eq!(tok.encode("yes").unwrap(), vec![257]);
    assert_eq!(tok.encode(" yes").unwrap(), vec![258]);
    assert_eq!(tok.encode("<|begin_of_text|> the").unwrap(), vec![400, 263]);
    assert_eq!(tok.token_to_id(" no"), Some(260));
    // the directory form finds the same file
    let again = load_tokenizer(dir.path()).unwrap();
    assert_eq!(again.encode(" no").unwrap(), vec![260]);
}

#[test]
fn unknown_merge_entry_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tokenizer_json();
    v["model"]["merges"].as_array_mut().unwrap().push(json!("zz qq"));
    let path = dir.path().join("tokenizer.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let err = load_tokenizer(&path).unwrap_err().to_string();
    assert!(err.contains("zz"), "{err}");
}

#[test]
fn fixture_tokenizer_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.json");
    std::fs::write(&path, fixture::tokenizer().to_json()).unwrap();
    let tok = load_tokenizer(&path).unwrap();
    assert_eq!(tok.encode("APPLE").unwrap(), fixture::tokenizer().encode("APPLE").unwrap());
}

proptest! {
    #[test]
    fn fixture_decode_inverts_encode(s in "\\PC{0,40}") {
        let tok = FixtureTokenizer::standard();
        prop_assert_eq!(tok.decode(&tok.encode(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn bpe_decode_inverts_encode(s in "[a-z ?!\\n]{0,30}|\\PC{0,12}") {
        let tok = relpatch::tokenizer::BpeTokenizer::from_tokenizer_json_value(&tokenizer_json()).unwrap();
        prop_assert_eq!(tok.decode(&tok.encode(&s).unwrap()).unwrap(), s);
    }
}
