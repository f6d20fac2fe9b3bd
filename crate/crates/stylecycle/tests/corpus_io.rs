mod support;

use std::fs;

use stylecycle::corpus::{decode_frames, encode_frames, load_manifest, read_frames, write_frames, Corpus, MANIFEST_FILE};
use stylecycle::Category;
use stylecycle_core::Frames;

#[test]
fn same_seed_same_hash() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = support::small_corpus(a.path(), 7).hash;
    let hb = support::small_corpus(b.path(), 7).hash;
    let hc = support::small_corpus(c.path(), 8).hash;
    assert_eq!(ha, hb);
    assert_ne!(ha, hc);
}

#[test]
fn loaded_frames_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(dir.path(), 3);
    assert_eq!(corpus.frames.len(), corpus.manifest.utterances.len());
    for (u, f) in corpus.manifest.utterances.iter().zip(&corpus.frames).take(5) {
        assert_eq!(f.num_frames(), u.num_frames);
        assert_eq!(&read_frames(&dir.path().join(&u.file)).unwrap(), f);
    }
}

#[test]
fn missing_frame_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(dir.path(), 3);
    let u = &corpus.manifest.utterances[4];
    fs::remove_file(dir.path().join(&u.file)).unwrap();
    let err = Corpus::load(dir.path()).unwrap_err();
    assert_eq!(err.category(), Category::Data);
    assert!(err.to_string().contains(&u.id), "{err}");
}

#[test]
fn shape_mismatch_and_truncation_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::small_corpus(dir.path(), 3);
    let u = corpus.manifest.utterances[0].clone();
    let path = dir.path().join(&u.file);
    write_frames(&path, &Frames::zeros(u.num_frames + 1, corpus.manifest.frame_dim)).unwrap();
    assert_eq!(load_manifest(dir.path()).unwrap_err().category(), Category::Data);

    let mut bytes = encode_frames(&corpus.frames[0]);
    bytes.truncate(bytes.len() - 3);
    fs::write(&path, &bytes).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap_err().category(), Category::Data);
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    support::small_corpus(dir.path(), 3);
    let mpath = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).unwrap();
    fs::write(&mpath, &text[..text.len() / 2]).unwrap();
    assert_eq!(Corpus::load(dir.path()).unwrap_err().category(), Category::Data);
    fs::write(&mpath, text.replace("\"frame_dim\"", "\"frame_dims\"")).unwrap();
    assert!(Corpus::load(dir.path()).is_err());
}

#[test]
fn long_external_frames_round_trip() {
    let data: Vec<f64> = (0..120 * 32).map(|i| ((i % 97) as f64 * 0.25).sin()).collect();
    let f = Frames::new(120, 32, data).unwrap();
    let back = decode_frames("ext".as_ref(), &encode_frames(&f)).unwrap();
    assert_eq!(back.num_frames(), 120);
    for (a, b) in back.as_slice().iter().zip(f.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }
}
