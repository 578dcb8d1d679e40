use proptest::prelude::*;

use srctrace::dataio::{
    decode_embeddings, decode_logits, encode_embeddings, encode_logits, read_embeddings,
    write_embeddings, EmbeddingSet, LogitSet, Manifest, ManifestRecord, Split,
};
use srctrace::linalg::Matrix;

fn ids(n: usize, tag: &str) -> Vec<String> {
    (0..n).map(|i| format!("{tag}{i}")).collect()
}

fn f32_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            any::<f32>().prop_filter("finite", |v| v.is_finite()),
            Just(-0.0f32),
            Just(f32::MIN_POSITIVE / 4.0),
        ]
        .prop_map(f64::from),
        len,
    )
}

fn embedding_set() -> impl Strategy<Value = EmbeddingSet> {
    (0usize..20, 1usize..10).prop_flat_map(|(n, d)| {
        f32_values(n * d).prop_map(move |v| {
            EmbeddingSet::new(ids(n, "é-"), Matrix::from_vec(n, d, v).unwrap()).unwrap()
        })
    })
}

fn logit_set() -> impl Strategy<Value = LogitSet> {
    (0usize..20, 2usize..6).prop_flat_map(|(n, k)| {
        f32_values(n * k).prop_map(move |v| {
            LogitSet::new(
                ids(n, "x"),
                ids(k, "class-"),
                Matrix::from_vec(n, k, v).unwrap(),
            )
            .unwrap()
        })
    })
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn embeddings_round_trip(set in embedding_set()) {
        let bytes = encode_embeddings(&set).unwrap();
        let back = decode_embeddings(&bytes).unwrap();
        prop_assert_eq!(back.ids(), set.ids());
        prop_assert_eq!(bits(back.data()), bits(set.data()));
        prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
    }

    #[test]
    fn logits_round_trip(set in logit_set()) {
        let bytes = encode_logits(&set).unwrap();
        let back = decode_logits(&bytes).unwrap();
        prop_assert_eq!(back.ids(), set.ids());
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(bits(back.data()), bits(set.data()));
        prop_assert_eq!(encode_logits(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_always_a_format_error(set in embedding_set(), cut in 0usize..1000) {
        let bytes = encode_embeddings(&set).unwrap();
        let cut = cut % bytes.len();
        prop_assert!(
            matches!(decode_embeddings(&bytes[..cut]), Err(srctrace::Error::Format { .. })),
            "truncated at {}", cut
        );
    }

    #[test]
    fn join_is_order_independent(n in 1usize..30, shift in 0usize..30, extra in 0usize..5) {
        let records: Vec<ManifestRecord> = (0..n)
            .map(|i| ManifestRecord { id: format!("s{i}"), label: format!("src{}", i % 3), split: Split::Train, is_ood: false })
            .collect();
        let manifest = Manifest::from_records(records).unwrap();
        // ids present in the set, rotated, plus some the manifest lacks
        let mut query: Vec<String> = (0..n).map(|i| format!("s{}", (i + shift) % n)).collect();
        query.extend((0..extra).map(|i| format!("missing{i}")));
        let joined = manifest.join(&query);
        prop_assert_eq!(joined.len(), n);
        for (row, rec) in &joined {
            prop_assert_eq!(&query[*row], &rec.id);
        }
        let mut reversed = query.clone();
        reversed.reverse();
        let mut a: Vec<&str> = joined.iter().map(|(_, r)| r.id.as_str()).collect();
        let mut b: Vec<&str> = manifest.join(&reversed).iter().map(|(_, r)| r.id.as_str()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn select_follows_requested_order(set in embedding_set(), shift in 0usize..20) {
        prop_assume!(!set.is_empty());
        let n = set.len();
        let want: Vec<String> = (0..n).map(|i| set.ids()[(i + shift) % n].clone()).collect();
        let picked = set.select(&want).unwrap();
        prop_assert_eq!(picked.ids(), want.as_slice());
        for (i, id) in want.iter().enumerate() {
            let src = set.ids().iter().position(|x| x == id).unwrap();
            prop_assert_eq!(picked.data().row(i), set.data().row(src));
        }
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = EmbeddingSet::new(
        ids(3, "a"),
        Matrix::from_vec(3, 2, vec![1.0, -2.5, 0.0, 3.0, 1e-3_f32 as f64, 7.0]).unwrap(),
    )
    .unwrap();
    let path = dir.path().join("x.steb");
    write_embeddings(&path, &set).unwrap();
    assert_eq!(read_embeddings(&path).unwrap(), set);
}
