use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, gen_character, gen_character_motion, render_frame, render_skeleton, CharacterSpec, PoseFrame,
    PoseSequence, NUM_JOINTS,
};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "clip.json";

/// One generated clip. Paths are relative to the clip directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub character: CharacterSpec,
    pub poses: PoseSequence,
    pub frame_paths: Vec<PathBuf>,
    pub skeleton_paths: Vec<PathBuf>,
    pub reference_index: usize,
    pub resolution: u32,
}

/// On-disk form of `clip.json`.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    length: usize,
    fps: f64,
    reference_index: usize,
    resolution: u32,
    character: CharacterSpec,
    joints: Vec<Vec<[f64; 2]>>,
    frames: Vec<PathBuf>,
    skeletons: Vec<PathBuf>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })
}

pub fn load_png(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })?;
    Ok(img.to_rgb8())
}

/// Renders and writes a clip: `frames/%05d.png`, `skeletons/%05d.png`,
/// `ref.png` and the `clip.json` manifest.
pub fn emit_clip(
    character: &CharacterSpec,
    poses: &PoseSequence,
    out_dir: &Path,
    reference_index: usize,
    resolution: u32,
) -> Result<ClipRecord> {
    if poses.is_empty() {
        return Err(Error::invalid("cannot emit an empty clip"));
    }
    if reference_index >= poses.len() {
        return Err(Error::invalid(format!(
            "reference index {reference_index} out of range for {} frames",
            poses.len()
        )));
    }
    create_dir(&out_dir.join("frames"))?;
    create_dir(&out_dir.join("skeletons"))?;
    let mut frame_paths = Vec::with_capacity(poses.len());
    let mut skeleton_paths = Vec::with_capacity(poses.len());
    for (i, pose) in poses.frames.iter().enumerate() {
        let frame_rel = PathBuf::from(format!("frames/{i:05}.png"));
        let skel_rel = PathBuf::from(format!("skeletons/{i:05}.png"));
        let frame = render_frame(character, pose, resolution)?;
        save_png(&frame, &out_dir.join(&frame_rel))?;
        if i == reference_index {
            save_png(&frame, &out_dir.join("ref.png"))?;
        }
        save_png(&render_skeleton(pose, resolution)?, &out_dir.join(&skel_rel))?;
        frame_paths.push(frame_rel);
        skeleton_paths.push(skel_rel);
    }
    let record = ClipRecord {
        character: character.clone(),
        poses: poses.clone(),
        frame_paths,
        skeleton_paths,
        reference_index,
        resolution,
    };
    let manifest = Manifest {
        seed: character.seed,
        length: poses.len(),
        fps: poses.fps,
        reference_index,
        resolution,
        character: character.clone(),
        joints: poses.frames.iter().map(|f| f.joints.clone()).collect(),
        frames: record.frame_paths.clone(),
        skeletons: record.skeleton_paths.clone(),
    };
    let path = out_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

/// Reads `clip.json` from a clip directory.
pub fn load_clip(clip_dir: &Path) -> Result<ClipRecord> {
    let path = clip_dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
    let consistent = m.joints.len() == m.length
        && m.frames.len() == m.length
        && m.skeletons.len() == m.length
        && m.reference_index < m.length
        && m.joints.iter().all(|j| j.len() == NUM_JOINTS);
    if !consistent {
        return Err(Error::format(&path, "inconsistent clip manifest"));
    }
    let frames = m
        .joints
        .into_iter()
        .map(PoseFrame::new)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format(&path, e))?;
    Ok(ClipRecord {
        character: m.character,
        poses: PoseSequence { frames, fps: m.fps },
        frame_paths: m.frames,
        skeleton_paths: m.skeletons,
        reference_index: m.reference_index,
        resolution: m.resolution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub clips: usize,
    pub frames: usize,
    pub seed: u64,
    pub resolution: u32,
    pub motion_amplitude: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            clips: 20,
            frames: 24,
            seed: 0,
            resolution: 64,
            motion_amplitude: 0.04,
        }
    }
}

/// Writes `<root>/clips/<id>/...` for every clip and returns the records with
/// their directories.
pub fn gen_dataset(root: &Path, cfg: &DatasetConfig) -> Result<Vec<(PathBuf, ClipRecord)>> {
    if cfg.clips == 0 || cfg.frames == 0 {
        return Err(Error::invalid("dataset needs at least one clip of one frame"));
    }
    (0..cfg.clips)
        .map(|i| {
            let clip_seed = derive_seed(cfg.seed, i as u64 + 1);
            let character = gen_character(clip_seed);
            let poses = gen_character_motion(&character, clip_seed, cfg.frames, cfg.motion_amplitude)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(clip_seed, 0x2EF));
            let reference_index = rng.random_range(0..cfg.frames);
            let dir = root.join("clips").join(format!("{i:05}"));
            let rec = emit_clip(&character, &poses, &dir, reference_index, cfg.resolution)?;
            Ok((dir, rec))
        })
        .collect()
}

/// Lists clip directories under `<root>/clips`, sorted by name.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    let clips = root.join("clips");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&clips)
        .map_err(|e| Error::io(&clips, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_NAME).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_character_motion;

    #[test]
    fn emit_writes_all_files_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_character(12);
        let poses = gen_character_motion(&c, 12, 24, 0.04).unwrap();
        let rec = emit_clip(&c, &poses, dir.path(), 0, 32).unwrap();
        let count = |sub: &str| fs::read_dir(dir.path().join(sub)).unwrap().count();
        assert_eq!(count("frames"), 24);
        assert_eq!(count("skeletons"), 24);
        assert!(dir.path().join("clip.json").is_file());

        let ref_img = load_png(&dir.path().join("ref.png")).unwrap();
        let first = load_png(&dir.path().join("frames/00000.png")).unwrap();
        assert_eq!(ref_img, first);

        assert_eq!(load_clip(dir.path()).unwrap(), rec);
    }

    #[test]
    fn files_match_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_character(3);
        let poses = gen_character_motion(&c, 4, 5, 0.05).unwrap();
        let rec = emit_clip(&c, &poses, dir.path(), 2, 32).unwrap();
        for (i, pose) in poses.frames.iter().enumerate() {
            let f = load_png(&dir.path().join(&rec.frame_paths[i])).unwrap();
            assert_eq!(f, render_frame(&c, pose, 32).unwrap());
            let s = load_png(&dir.path().join(&rec.skeleton_paths[i])).unwrap();
            assert_eq!(s, render_skeleton(pose, 32).unwrap());
        }
    }

    #[test]
    fn bad_reference_index_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_character(3);
        let poses = gen_character_motion(&c, 4, 3, 0.05).unwrap();
        assert!(emit_clip(&c, &poses, dir.path(), 3, 32).is_err());
    }

    #[test]
    fn unwritable_output_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let c = gen_character(3);
        let poses = gen_character_motion(&c, 4, 2, 0.05).unwrap();
        match emit_clip(&c, &poses, &blocker.join("clip"), 0, 32) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with(&blocker)),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            clips: 3,
            frames: 4,
            resolution: 32,
            ..Default::default()
        };
        let clips = gen_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(list_clips(dir.path()).unwrap().len(), 3);
        for (d, rec) in clips {
            assert_eq!(load_clip(&d).unwrap(), rec);
        }
    }
}
