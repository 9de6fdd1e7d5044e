//! Synthetic dataset generation and the on-disk frame format.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json       effective generation config, its SHA-256, counts
//! index.json          {"train": [...], "val": [...]} relative frame paths
//! train/sNNNN_fNNN.frame
//! val/sNNNN_fNNN.frame
//! ```
//!
//! Frame record, integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "DLOFRAME"
//! version   u32      1
//! n         u32      cloud points
//! m         u32      nodes
//! cloud     n x 3 f32
//! nodes     m x 3 f32
//! mask      m bytes  1 = occluded
//! meta_len  u32
//! meta      meta_len bytes of JSON
//! ```
//!
//! Clouds are stored as rendered, before occlusion and farthest point
//! sampling; those happen when a frame is consumed.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DloError, Result};
use crate::geometry::{NodeSequence, PointCloud, Vec3};
use crate::par::Exec;
use crate::synth::{
    occlusion_mask, random_view, render_cloud, resample_nodes, simulate_sequence, RenderConfig, RopeSpec, SimConfig,
};

pub const FRAME_MAGIC: &[u8; 8] = b"DLOFRAME";
pub const FRAME_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub nodes: usize,
    pub val_fraction: f64,
    pub rope_length: [f64; 2],
    pub rope_radius: [f64; 2],
    pub stiffness: [f64; 2],
    pub particles: usize,
    /// Surface samples per meter of rope.
    pub density: f64,
    /// Largest camera tilt from vertical, radians.
    pub camera_tilt: f64,
    /// Radius used for the stored occlusion mask.
    pub mask_radius: f64,
    pub sim: SimConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 100,
            frames_per_sequence: 25,
            nodes: 16,
            val_fraction: 0.2,
            rope_length: [0.5, 0.8],
            rope_radius: [0.003, 0.006],
            stiffness: [0.2, 0.9],
            particles: 64,
            density: 2000.0,
            camera_tilt: 0.6,
            mask_radius: 0.02,
            sim: SimConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] >= lo && r[1] <= hi && r[0] <= r[1]) {
        return Err(DloError::Config(format!("{name} range {r:?} must lie in [{lo}, {hi}] and be ordered")));
    }
    Ok(())
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences < 2 || self.frames_per_sequence == 0 {
            return Err(DloError::Config("need at least 2 sequences of at least 1 frame".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(DloError::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        check_range("rope_length", self.rope_length, 1e-3, 100.0)?;
        check_range("rope_radius", self.rope_radius, 1e-6, 1.0)?;
        check_range("stiffness", self.stiffness, 0.0, 1.0)?;
        if !(self.density > 0.0) || !(self.mask_radius > 0.0) || !(self.camera_tilt >= 0.0) {
            return Err(DloError::Config("density, mask_radius and camera_tilt must be positive".into()));
        }
        RopeSpec {
            length: self.rope_length[0],
            radius: self.rope_radius[0],
            stiffness: self.stiffness[0],
            particles: self.particles,
        }
        .validate(self.nodes)
        .map_err(|e| DloError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn val_sequences(&self) -> usize {
        ((self.sequences as f64 * self.val_fraction).round() as usize).clamp(1, self.sequences - 1)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub sequence: usize,
    pub frame: usize,
    pub seed: u64,
    pub rope: RopeSpec,
    pub camera: [f64; 3],
    pub occlusion_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub nodes: NodeSequence,
    /// `true` where the node has no cloud point within the mask radius.
    pub mask: Vec<bool>,
    pub meta: FrameMeta,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DloError::Format(format!("count {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_points(buf: &mut Vec<u8>, pts: &[Vec3]) {
    for p in pts {
        for c in p.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| DloError::Format("truncated frame record".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn points(&mut self, n: usize) -> Result<Vec<Vec3>> {
        let raw = self.take(n.checked_mul(12).ok_or_else(|| DloError::Format("point count overflow".into()))?)?;
        Ok(raw
            .chunks_exact(12)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes([c[k], c[k + 1], c[k + 2], c[k + 3]]) as f64;
                Vec3::new(f(0), f(4), f(8))
            })
            .collect())
    }
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| DloError::Format(e.to_string()))?;
        let mut buf = Vec::with_capacity(24 + 12 * (self.cloud.len() + self.nodes.len()) + meta.len());
        buf.extend_from_slice(FRAME_MAGIC);
        put_u32(&mut buf, FRAME_VERSION as usize)?;
        put_u32(&mut buf, self.cloud.len())?;
        put_u32(&mut buf, self.nodes.len())?;
        put_points(&mut buf, &self.cloud.0);
        put_points(&mut buf, &self.nodes.0);
        buf.extend(self.mask.iter().map(|&o| o as u8));
        put_u32(&mut buf, meta.len())?;
        buf.extend_from_slice(&meta);
        Ok(buf)
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut c = Cursor { data, pos: 0 };
        if c.take(8)? != FRAME_MAGIC {
            return Err(DloError::Format("not a frame record (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != FRAME_VERSION as usize {
            return Err(DloError::Format(format!("unsupported frame version {version}")));
        }
        let n = c.u32()?;
        let m = c.u32()?;
        let cloud = PointCloud(c.points(n)?);
        let nodes = NodeSequence(c.points(m)?);
        let mask = c.take(m)?.iter().map(|&b| b != 0).collect();
        let meta_len = c.u32()?;
        let meta = serde_json::from_slice(c.take(meta_len)?)
            .map_err(|e| DloError::Format(format!("frame metadata: {e}")))?;
        if c.pos != data.len() {
            return Err(DloError::Format("trailing bytes after frame record".into()));
        }
        Ok(Self {
            cloud,
            nodes,
            mask,
            meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)
            .map_err(|e| DloError::Format(format!("cannot open frame {}: {e}", path.display())))?
            .read_to_end(&mut data)?;
        Self::decode(&data)
    }
}

/// Per-sequence random stream derived from the master seed.
pub fn sequence_rng(seed: u64, sequence: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sequence as u64 + 1);
    rng
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Simulates and renders all frames of one sequence.
pub fn generate_sequence(cfg: &DataConfig, sequence: usize) -> Result<Vec<Frame>> {
    let mut rng = sequence_rng(cfg.seed, sequence);
    let rope = RopeSpec {
        length: sample_range(&mut rng, cfg.rope_length),
        radius: sample_range(&mut rng, cfg.rope_radius),
        stiffness: sample_range(&mut rng, cfg.stiffness),
        particles: cfg.particles,
    };
    let sim_seed = rng.random::<u64>();
    let states = simulate_sequence(&rope, sim_seed, cfg.frames_per_sequence, &cfg.sim)?;
    let mut frames = Vec::with_capacity(states.len());
    for (f, state) in states.iter().enumerate() {
        let camera = random_view(&mut rng, cfg.camera_tilt);
        let seed = rng.random::<u64>();
        let render = RenderConfig {
            density: cfg.density,
            toward_camera: camera,
        };
        let cloud = render_cloud(state, &rope, &render, seed)?;
        let nodes = resample_nodes(state, cfg.nodes)?;
        let mask = occlusion_mask(&cloud, &nodes, cfg.mask_radius);
        frames.push(Frame {
            cloud,
            nodes,
            mask,
            meta: FrameMeta {
                sequence,
                frame: f,
                seed,
                rope: rope.clone(),
                camera: [camera.x, camera.y, camera.z],
                occlusion_ratio: 0.0,
            },
        });
    }
    Ok(frames)
}

/// Sequence indices of the validation split, sorted.
pub fn validation_sequences(cfg: &DataConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..cfg.sequences).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ids.shuffle(&mut rng);
    let mut val = ids[..cfg.val_sequences()].to_vec();
    val.sort_unstable();
    val
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub config_hash: String,
    pub train_frames: usize,
    pub val_frames: usize,
    pub val_sequences: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

fn frame_name(split: &str, meta: &FrameMeta) -> String {
    format!("{split}/s{:04}_f{:03}.frame", meta.sequence, meta.frame)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| DloError::Format(e.to_string()))?;
    s.push('\n');
    let mut f = fs::File::create(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

/// Writes a complete dataset under `out`.
pub fn generate(cfg: &DataConfig, out: &Path, exec: Exec) -> Result<Manifest> {
    cfg.validate()?;
    for split in ["train", "val"] {
        fs::create_dir_all(out.join(split)).map_err(|e| {
            DloError::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", out.join(split).display())))
        })?;
    }
    let val_seq = validation_sequences(cfg);
    let results = exec.map_range(cfg.sequences, |s| -> Result<Vec<String>> {
        let split = if val_seq.binary_search(&s).is_ok() { "val" } else { "train" };
        let frames = generate_sequence(cfg, s)?;
        let mut names = Vec::with_capacity(frames.len());
        for f in &frames {
            let name = frame_name(split, &f.meta);
            f.write(&out.join(&name))?;
            names.push(name);
        }
        Ok(names)
    });
    let mut index = Index::default();
    for (s, names) in results.into_iter().enumerate() {
        let names = names?;
        if val_seq.binary_search(&s).is_ok() {
            index.val.extend(names);
        } else {
            index.train.extend(names);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        train_frames: index.train.len(),
        val_frames: index.val.len(),
        val_sequences: val_seq,
    };
    write_json(&out.join("index.json"), &index)?;
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| DloError::Format(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| DloError::Format(format!("{}: {e}", path.display())))
}

impl Dataset {
    pub fn open(root: &Path, exec: Exec) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DloError::Format(format!(
                "dataset format version {} unsupported",
                manifest.format_version
            )));
        }
        let index: Index = read_json(&root.join("index.json"))?;
        let load = |names: &[String]| -> Result<Vec<Frame>> {
            exec.map(names, |n| Frame::read(&root.join(n))).into_iter().collect()
        };
        Ok(Self {
            root: root.to_path_buf(),
            train: load(&index.train)?,
            val: load(&index.val)?,
            manifest,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            sequences: 4,
            frames_per_sequence: 2,
            nodes: 8,
            particles: 24,
            density: 400.0,
            ..Default::default()
        }
    }

    #[test]
    fn frame_round_trip_and_corruption() {
        let f = generate_sequence(&small(), 0).unwrap().remove(0);
        let bytes = f.encode().unwrap();
        let back = Frame::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.mask, f.mask);
        assert_eq!(back.meta, f.meta);
        for (a, b) in back.cloud.0.iter().zip(&f.cloud.0) {
            assert!((a - b).norm() < 1e-6);
        }
        assert!(Frame::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Frame::decode(&bad).is_err());
    }

    #[test]
    fn gt_nodes_are_uniform_and_mask_consistent() {
        for f in generate_sequence(&small(), 1).unwrap() {
            let sp = f.nodes.spacings();
            let mean = sp.iter().sum::<f64>() / sp.len() as f64;
            let var = sp.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sp.len() as f64;
            assert!(var.sqrt() < 0.01 * mean, "{sp:?}");
            assert_eq!(f.mask, occlusion_mask(&f.cloud, &f.nodes, 0.02));
        }
    }

    #[test]
    fn split_is_by_sequence_and_disjoint() {
        let cfg = DataConfig {
            sequences: 10,
            ..small()
        };
        let val = validation_sequences(&cfg);
        assert_eq!(val.len(), 2);
        assert_eq!(val, validation_sequences(&cfg));
    }

    #[test]
    fn hash_tracks_every_parameter() {
        let a = small();
        let mut b = small();
        b.sim.damping = 0.97;
        let mut c = small();
        c.rope_radius[1] = 0.007;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash(), small().hash());
    }
}
