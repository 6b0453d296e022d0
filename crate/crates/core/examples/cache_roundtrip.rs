//! Writes an embedding cache the way an extractor would, reads it back, and
//! shows that a flipped byte is caught rather than silently accepted.

use chronoprobe::embedcache::{
    append_index, read_cache, read_index, validate_tree, write_cache, CacheKey, CacheRecord,
    IndexEntry, PayloadKind, TokenMatrix,
};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let key = CacheKey::new(
        "multibert-seed0",
        200_000,
        "subj_number",
        "test",
        PayloadKind::TokenEmbeddings,
    );
    let records = vec![
        CacheRecord::new(
            "s1#0",
            TokenMatrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]),
        )
        .with_mask(vec![true, false]),
        CacheRecord::new("s2#0", TokenMatrix::from_rows(&[vec![1.0, -1.0, 0.5]])),
    ];
    let path = write_cache(root, &key, &records).unwrap();
    println!("wrote {}", path.strip_prefix(root).unwrap().display());

    let (read_key, read_records) = read_cache(&path).unwrap();
    assert_eq!(read_key, key);
    // Once any record has a mask, the file stores one for every record; a
    // missing mask comes back as all-true, which means the same thing.
    for (a, b) in read_records.iter().zip(&records) {
        assert_eq!(
            (&a.example_id, &a.matrix, a.mask()),
            (&b.example_id, &b.matrix, b.mask())
        );
    }
    println!("round trip: {} records, identical", read_records.len());

    // Masked scoring is not available for encoder-decoder models; the extractor
    // records that instead of writing a file.
    let t5 = CacheKey::new(
        "t5-small",
        0,
        "anaphor_agreement",
        "all",
        PayloadKind::MaskedLogprobs,
    );
    append_index(root, &IndexEntry::unsupported(&t5)).unwrap();
    for entry in read_index(root).unwrap() {
        println!(
            "index: {} step {} {} -> {:?}",
            entry.model_id, entry.checkpoint_step, entry.task, entry.status
        );
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[40] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    for check in validate_tree(root).unwrap() {
        match check.result {
            Ok((_, n)) => println!("valid: {} ({n} records)", check.path.display()),
            Err(e) => println!("rejected [{}]: {e}", e.code()),
        }
    }
}
