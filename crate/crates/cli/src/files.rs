//! Filesystem side of the command line: WAV audio, manifests, tensor
//! directories and the run directory store.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskpred::corpus::{format_labels, load_manifest, ManifestReader, Utterance};
use maskpred::dsp::FeatureSequence;
use maskpred::formats::{read_tensor, write_tensor, TensorData};
use maskpred::pipeline::RunStore;
use maskpred::tensor::Tensor;
use maskpred::{Error, Result};

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Write through a temporary file so readers never see a partial file.
pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut buf = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| io_err(path, e))?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            w.write_sample(v).map_err(|e| io_err(path, e))?;
        }
        w.finalize().map_err(|e| io_err(path, e))?;
    }
    write(path, &buf.into_inner())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path).map_err(|e| io_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(io_err(path, "expected 16-bit PCM mono"));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| io_err(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Resolves manifest paths relative to the manifest's directory.
struct DirReader(PathBuf);

impl ManifestReader for DirReader {
    fn wav(&mut self, path: &str) -> Result<(Vec<f32>, u32)> {
        read_wav(&self.0.join(path))
    }

    fn text(&mut self, path: &str) -> Result<String> {
        read_text(&self.0.join(path))
    }
}

pub fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let text = read_text(manifest)?;
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    load_manifest(&text, &mut DirReader(dir))
}

/// Corpus directory: `manifest.tsv`, `wav/`, `clean/` and `labels/`.
pub fn save_corpus(dir: &Path, utts: &[Utterance]) -> Result<()> {
    let mut manifest = String::new();
    for u in utts {
        let wav = format!("wav/{}.wav", u.id);
        write_wav(&dir.join(&wav), &u.samples, u.sample_rate)?;
        let labels = match &u.phone_labels {
            Some(l) => {
                let p = format!("labels/{}.txt", u.id);
                write(&dir.join(&p), format_labels(l).as_bytes())?;
                p
            }
            None => String::new(),
        };
        let clean = match &u.clean_samples {
            Some(c) => {
                let p = format!("clean/{}.wav", u.id);
                write_wav(&dir.join(&p), c, u.sample_rate)?;
                p
            }
            None => String::new(),
        };
        let speaker = u.speaker_id.map_or_else(String::new, |s| s.to_string());
        manifest.push_str(&format!("{}\t{wav}\t{speaker}\t{labels}\t{clean}\n", u.id));
    }
    write(&dir.join("manifest.tsv"), manifest.as_bytes())
}

pub fn save_tensor(path: &Path, t: &TensorData) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    write(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<TensorData> {
    read_tensor(&mut read(path)?.as_slice()).map_err(|e| io_err(path, e))
}

pub fn feature_tensor(f: &FeatureSequence) -> Result<TensorData> {
    Ok(TensorData::F32(Tensor::matrix(f.frames, f.dims, f.data.clone())?))
}

/// `.mtl` files given directly or found in the given directories, sorted per directory.
pub fn tensor_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "mtl"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Input("no tensor files found".into()));
    }
    Ok(out)
}

/// Run directory guarded by a lock file for the lifetime of the value.
pub struct DirStore {
    root: PathBuf,
    lock: PathBuf,
}

impl DirStore {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let lock = root.join(".lock");
        fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Input(format!("{} is locked by another run; remove it if that run is dead", lock.display()))
            } else {
                io_err(&lock, e)
            }
        })?;
        Ok(Self { root: root.to_path_buf(), lock })
    }
}

impl Drop for DirStore {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

impl RunStore for DirStore {
    fn get(&self, path: &str) -> Result<Option<Vec<u8>>> {
        let p = self.root.join(path);
        match fs::read(&p) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&p, e)),
        }
    }

    fn put(&mut self, path: &str, bytes: &[u8]) -> Result<()> {
        write(&self.root.join(path), bytes)
    }
}
