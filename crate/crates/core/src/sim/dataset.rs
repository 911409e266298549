//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/demo_0000/poses.bin        T×7 little-endian f64 (tx ty tz w x y z)
//! <dir>/demo_0000/pen.bin          T bytes (0/1)
//! <dir>/demo_0000/frame_0000.png   16-bit RGB camera frames
//! <dir>/demo_0000/final.png        16-bit grayscale final canvas
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Canvas, Demonstration, Observation, SimConfig, CHANNELS};
use crate::error::{Error, Result};
use crate::fsutil::{fingerprint, AtomicDir};
use crate::geometry::{PoseState, Quat, POSE_DIM};
use crate::imageio::{read_png16, write_png16};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub image_shape: [usize; 3],
    pub timesteps: Vec<usize>,
    pub template_ids: Vec<String>,
    pub seeds: Vec<u64>,
    pub config_fingerprint: String,
    pub sim: SimConfig,
}

fn demo_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("demo_{i:04}"))
}

/// Writes `demos` to `path`, replacing any existing dataset there only once
/// the new one is complete.
pub fn write_dataset(demos: &[Demonstration], path: &Path, sim: &SimConfig) -> Result<DatasetManifest> {
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        image_shape: sim.image_shape(),
        timesteps: demos.iter().map(Demonstration::len).collect(),
        template_ids: demos.iter().map(|d| d.template_id.clone()).collect(),
        seeds: demos.iter().map(|d| d.style_seed).collect(),
        config_fingerprint: fingerprint(sim),
        sim: sim.clone(),
    };
    let staging = AtomicDir::begin(path)?;
    let root = staging.path();
    let [c, h, w] = manifest.image_shape;
    for (i, demo) in demos.iter().enumerate() {
        let dir = demo_dir(root, i);
        fs::create_dir_all(&dir)?;
        let mut poses = Vec::with_capacity(demo.len() * POSE_DIM * 8);
        for obs in &demo.observations {
            for v in obs.pose.to_vec7() {
                poses.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("poses.bin"), poses)?;
        fs::write(
            dir.join("pen.bin"),
            demo.pen_down.iter().map(|&b| u8::from(b)).collect::<Vec<u8>>(),
        )?;
        for (k, obs) in demo.observations.iter().enumerate() {
            if obs.image.shape() != [c, h, w] {
                return Err(Error::Shape {
                    op: "write_dataset",
                    lhs: obs.image.shape().to_vec(),
                    rhs: vec![c, h, w],
                });
            }
            write_png16(&dir.join(format!("frame_{k:04}.png")), c, h, w, obs.image.data())?;
        }
        let fc = &demo.final_canvas;
        write_png16(&dir.join("final.png"), 1, fc.height, fc.width, &fc.data)?;
    }
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    staging.commit()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = path.join("manifest.json");
    let text = fs::read_to_string(&file)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&file, e.to_string()))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::format(
            &file,
            format!("schema version {} (expected {DATASET_SCHEMA_VERSION})", manifest.schema_version),
        ));
    }
    let n = manifest.timesteps.len();
    if manifest.template_ids.len() != n || manifest.seeds.len() != n {
        return Err(Error::format(&file, "per-demonstration lists differ in length"));
    }
    if manifest.config_fingerprint != fingerprint(&manifest.sim) {
        return Err(Error::format(&file, "config fingerprint does not match simulator config"));
    }
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Demonstration>)> {
    let manifest = read_manifest(path)?;
    let [c, h, w] = manifest.image_shape;
    let mut demos = Vec::with_capacity(manifest.timesteps.len());
    for (i, &steps) in manifest.timesteps.iter().enumerate() {
        let dir = demo_dir(path, i);
        let pose_file = dir.join("poses.bin");
        let raw = fs::read(&pose_file)?;
        if raw.len() != steps * POSE_DIM * 8 {
            return Err(Error::format(&pose_file, format!("expected {steps}×7 f64 values")));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let pen_file = dir.join("pen.bin");
        let pen = fs::read(&pen_file)?;
        if pen.len() != steps {
            return Err(Error::format(&pen_file, format!("expected {steps} flags")));
        }
        let mut observations = Vec::with_capacity(steps);
        for (k, v) in values.chunks_exact(POSE_DIM).enumerate() {
            // Stored quaternions are already unit; keep them bit-exact.
            let pose = PoseState {
                translation: [v[0], v[1], v[2]],
                rotation: Quat::new(v[3], v[4], v[5], v[6]),
                pen_down: pen[k] != 0,
            };
            let frame = dir.join(format!("frame_{k:04}.png"));
            let (fc, fh, fw, data) = read_png16(&frame)?;
            if [fc, fh, fw] != [c, h, w] {
                return Err(Error::format(&frame, format!("frame shape {:?}", [fc, fh, fw])));
            }
            observations.push(Observation {
                image: Tensor::new(vec![c, h, w], data)?,
                pose,
            });
        }
        let final_file = dir.join("final.png");
        let (fc, fh, fw, data) = read_png16(&final_file)?;
        if fc != 1 || fh != h || fw != w {
            return Err(Error::format(&final_file, "final canvas shape mismatch"));
        }
        demos.push(Demonstration {
            template_id: manifest.template_ids[i].clone(),
            style_seed: manifest.seeds[i],
            pen_down: pen.iter().map(|&b| b != 0).collect(),
            observations,
            final_canvas: Canvas {
                height: h,
                width: w,
                data,
            },
        });
    }
    debug_assert_eq!(c, CHANNELS);
    Ok((manifest, demos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{builtin, generate_demonstration, StyleJitter};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = SimConfig {
            image_height: 32,
            image_width: 32,
            ..SimConfig::default()
        };
        let demos: Vec<_> = [("line1", 1), ("cross2", 2)]
            .iter()
            .map(|(id, seed)| {
                generate_demonstration(&builtin(id).unwrap(), *seed, StyleJitter::from_config(&cfg), &cfg).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        let written = write_dataset(&demos, &path, &cfg).unwrap();
        let (manifest, back) = read_dataset(&path).unwrap();
        assert_eq!(manifest, written);
        assert_eq!(back, demos);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let cfg = SimConfig {
            image_height: 16,
            image_width: 16,
            ..SimConfig::default()
        };
        let demo = generate_demonstration(&builtin("line1").unwrap(), 0, StyleJitter::NONE, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds");
        write_dataset(&[demo], &path, &cfg).unwrap();
        let mpath = path.join("manifest.json");
        let text = fs::read_to_string(&mpath).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }
}
