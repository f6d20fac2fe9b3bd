//! Frame files, manifests and loaded corpora.
//!
//! Frame file layout: 8-byte magic `SCFRAMES`, `T` and `F` as little-endian
//! `u32`, then `T·F` little-endian `f32` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use stylecycle_core::corpus::{generate_corpus, CorpusManifest, GeneratorConfig, Split, StyleRole, Utterance};
use stylecycle_core::Frames;

use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 8] = b"SCFRAMES";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_frames(frames: &Frames) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * frames.as_slice().len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&(frames.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.dim() as u32).to_le_bytes());
    for v in frames.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_frames(path: &Path, bytes: &[u8]) -> Result<Frames> {
    if bytes.len() < 16 || &bytes[..8] != FRAME_MAGIC {
        return Err(Error::format(path, "not a frame file (bad magic)"));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if t == 0 || f == 0 {
        return Err(Error::format(path, "frame file declares an empty matrix"));
    }
    let body = &bytes[16..];
    if body.len() != 4 * t * f {
        return Err(Error::format(path, format!("header says {t}x{f} but holds {} values", body.len() / 4)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Frames::new(t, f, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads only the `(T, F)` header.
pub fn read_frame_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; 16];
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    file.read_exact(&mut head).map_err(|_| Error::format(path, "truncated frame header"))?;
    if &head[..8] != FRAME_MAGIC {
        return Err(Error::format(path, "not a frame file (bad magic)"));
    }
    let t = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    Ok((t, f))
}

pub fn write_frames(path: &Path, frames: &Frames) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_frames(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Frames> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frames(path, &bytes)
}

/// Rounds through `f32` so in-memory frames equal what is stored on disk.
pub fn quantize(frames: &Frames) -> Frames {
    let data = frames.as_slice().iter().map(|v| *v as f32 as f64).collect();
    Frames::new(frames.num_frames(), frames.dim(), data).expect("finite")
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes the manifest and every frame file under `dir`.
pub fn save_corpus(dir: &Path, manifest: &CorpusManifest, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-test");
    fs::File::create(&probe).and_then(|mut f| f.write_all(b"")).map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_file(&probe);
    for u in utterances {
        write_frames(&dir.join(&u.meta.file), &u.frames)?;
    }
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

/// Generates a corpus and writes it under `dir`.
pub fn generate_to(dir: &Path, cfg: &GeneratorConfig) -> Result<CorpusManifest> {
    let (manifest, utterances) = generate_corpus(cfg)?;
    save_corpus(dir, &manifest, &utterances)?;
    Ok(manifest)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a manifest and validates it eagerly, including every frame file's
/// existence and header shape.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let mpath = manifest_path(path);
    let manifest: CorpusManifest = read_json(&mpath)?;
    manifest.validate()?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    for u in &manifest.utterances {
        let fp = dir.join(&u.file);
        if !fp.exists() {
            return Err(Error::format(&fp, format!("frame file for utterance {} is missing", u.id)));
        }
        let (t, f) = read_frame_header(&fp)?;
        if t != u.num_frames || f != manifest.frame_dim {
            return Err(Error::format(
                &fp,
                format!("shape {t}x{f} does not match manifest {}x{}", u.num_frames, manifest.frame_dim),
            ));
        }
    }
    Ok(manifest)
}

/// A manifest with all frames in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    pub frames: Vec<Frames>,
    /// SHA-256 over the manifest text and every frame file.
    pub hash: String,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = load_manifest(path)?;
        let mpath = manifest_path(path);
        let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut hasher = Sha256::new();
        hasher.update(fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?);
        let mut frames = Vec::with_capacity(manifest.utterances.len());
        for u in &manifest.utterances {
            let fp = dir.join(&u.file);
            let bytes = fs::read(&fp).map_err(|e| Error::io(&fp, e))?;
            hasher.update(&bytes);
            frames.push(decode_frames(&fp, &bytes)?);
        }
        Ok(Self { dir, manifest, frames, hash: hex::encode(hasher.finalize()) })
    }

    pub fn select(&self, split: Split, role: StyleRole) -> Vec<usize> {
        self.manifest.select(split, role)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.manifest.utterances.iter().position(|u| u.id == id)
    }

    pub fn tokens(&self, i: usize) -> &[usize] {
        &self.manifest.utterances[i].tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_codec_round_trips() {
        let f = Frames::new(3, 2, vec![0.5, -1.25, 2.0, 3.0, 4.5, -0.0]).unwrap();
        let back = decode_frames(Path::new("x"), &encode_frames(&f)).unwrap();
        assert_eq!(back, f);
        let mut bytes = encode_frames(&f);
        bytes.pop();
        assert!(decode_frames(Path::new("x"), &bytes).is_err());
    }
}
