mod common;

use proptest::prelude::*;
use steered_core::io::{decode_model, encode_model, FileHeader, FORMAT_VERSION, MAGIC};
use steered_core::{make_test_model, read_model, write_model, Error, ModelConfig};

use common::tiny_config;

fn split(bytes: &[u8]) -> (FileHeader, Vec<u8>) {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    (header, bytes[16 + len..].to_vec())
}

fn assemble(version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

fn with_header(edit: impl FnOnce(&mut FileHeader)) -> Vec<u8> {
    let config = ModelConfig::new(8, 4, 4, 1, 2).unwrap();
    let bytes = encode_model(&config, &make_test_model(&config, 1)).unwrap();
    let (mut header, payload) = split(&bytes);
    edit(&mut header);
    assemble(
        FORMAT_VERSION,
        &serde_json::to_vec(&header).unwrap(),
        &payload,
    )
}

fn small_valid() -> Vec<u8> {
    with_header(|_| {})
}

type Case = (&'static str, Vec<u8>, fn(&Error) -> bool);

fn is_format(e: &Error) -> bool {
    matches!(e, Error::Format(_))
}

fn is_validation(e: &Error) -> bool {
    matches!(e, Error::Validation(_))
}

fn is_truncation(e: &Error) -> bool {
    matches!(e, Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof)
}

#[test]
fn malformed_corpus_is_rejected_with_the_right_error() {
    let valid = small_valid();
    assert!(decode_model(&valid).is_ok());

    let mut bad_magic = valid.clone();
    bad_magic[0] = b'X';
    let (_, payload) = split(&valid);
    let header_bytes = {
        let len = u64::from_le_bytes(valid[8..16].try_into().unwrap()) as usize;
        valid[16..16 + len].to_vec()
    };

    let cases: Vec<Case> = vec![
        ("empty", Vec::new(), is_truncation),
        ("bad magic", bad_magic, is_format),
        ("bad magic, short", b"GGUF\x01".to_vec(), is_format),
        (
            "future version",
            assemble(2, &header_bytes, &payload),
            is_format,
        ),
        ("preamble cut", valid[..10].to_vec(), is_truncation),
        ("header cut", valid[..20].to_vec(), is_truncation),
        (
            "payload cut",
            valid[..valid.len() - 4].to_vec(),
            is_truncation,
        ),
        (
            "header not json",
            assemble(FORMAT_VERSION, b"{not json", &payload),
            is_format,
        ),
        (
            "header wrong schema",
            assemble(FORMAT_VERSION, b"{\"tensors\":[]}", &payload),
            is_format,
        ),
        (
            "missing tensor",
            with_header(|h| {
                h.tensors.pop();
            }),
            is_validation,
        ),
        (
            "duplicate tensor",
            with_header(|h| {
                let t = h.tensors[1].clone();
                h.tensors[0] = t;
            }),
            is_validation,
        ),
        (
            "unknown tensor",
            with_header(|h| h.tensors[0].name = "lm_head".into()),
            is_validation,
        ),
        (
            "wrong shape",
            with_header(|h| h.tensors[0].shape = vec![4, 8]),
            is_validation,
        ),
        (
            "wrong dtype",
            with_header(|h| h.tensors[0].dtype = "f16".into()),
            is_validation,
        ),
        (
            "overlap",
            with_header(|h| h.tensors[1].byte_offset = h.tensors[0].byte_offset),
            is_validation,
        ),
        (
            "offset past end",
            with_header(|h| h.tensors[0].byte_offset = u64::MAX - 2),
            is_truncation,
        ),
        (
            "bad config",
            with_header(|h| h.config.n_heads = 3),
            is_validation,
        ),
    ];
    for (name, bytes, check) in cases {
        match decode_model(&bytes) {
            Ok(_) => panic!("{name}: accepted"),
            Err(e) => assert!(check(&e), "{name}: unexpected error {e:?}"),
        }
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut bytes = small_valid();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(decode_model(&bytes).is_err());
}

#[test]
fn tensor_order_in_header_is_free() {
    let reordered = with_header(|h| h.tensors.reverse());
    assert_eq!(
        decode_model(&reordered).unwrap(),
        decode_model(&small_valid()).unwrap()
    );
}

#[test]
fn layernorm_eps_defaults_when_absent() {
    let config = ModelConfig::new(8, 4, 4, 1, 2).unwrap();
    let bytes = encode_model(&config, &make_test_model(&config, 1)).unwrap();
    let (header, payload) = split(&bytes);
    let mut json = serde_json::to_value(&header).unwrap();
    json["config"]
        .as_object_mut()
        .unwrap()
        .remove("layernorm_eps");
    let bytes = assemble(
        FORMAT_VERSION,
        &serde_json::to_vec(&json).unwrap(),
        &payload,
    );
    assert_eq!(decode_model(&bytes).unwrap().0.layernorm_eps, 1e-5);
}

#[test]
fn file_round_trip_and_stable_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let weights = make_test_model(&config, 42);
    let a = dir.path().join("a.stlm");
    let b = dir.path().join("b.stlm");
    write_model(&a, &config, &weights).unwrap();
    write_model(&b, &config, &make_test_model(&config, 42)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (c2, w2) = read_model(&a).unwrap();
    assert_eq!(c2, config);
    assert_eq!(w2, weights);
    assert_eq!(w2.token_embedding_in, w2.token_embedding_out);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encode_decode_is_identity(
        seed in any::<u64>(),
        v in 2usize..40,
        heads in 1usize..4,
        head_dim in 1usize..6,
        layers in 1usize..3,
        ctx in 1usize..20,
    ) {
        let config = ModelConfig::new(v, ctx, heads * head_dim, layers, heads).unwrap();
        let weights = make_test_model(&config, seed);
        let (c2, w2) = decode_model(&encode_model(&config, &weights).unwrap()).unwrap();
        prop_assert_eq!(c2, config);
        prop_assert_eq!(w2, weights);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_model(&bytes);
        let mut with_magic = MAGIC.to_vec();
        with_magic.extend_from_slice(&bytes);
        let _ = decode_model(&with_magic);
    }
}
