use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, GenConfig, SpriteVideo};
use crate::error::{Error, Result};
use crate::metrics::{mask_to_box, BinaryMask};

/// Contents of a clip's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub seed: u64,
    pub config: GenConfig,
    pub object_ids: Vec<Vec<u32>>,
}

const IMAGE_EXTS: [&str; 6] = ["ppm", "pgm", "pnm", "png", "jpg", "jpeg"];

fn ingest(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| ingest(dir, e.to_string()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ingest(dir, e.to_string()))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads a directory of frames, plus integer label maps from a sibling
/// `masks/` directory when one exists. Returns the clip and whether it
/// carries annotations.
pub fn load_frames_dir(path: &Path) -> Result<(SpriteVideo, bool)> {
    let files = image_files(path)?;
    if files.is_empty() {
        return Err(ingest(path, "no image files"));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut dims = None;
    for f in &files {
        let img = image::open(f).map_err(|e| ingest(f, e.to_string()))?.to_rgb8();
        let d = img.dimensions();
        if *dims.get_or_insert(d) != d {
            return Err(ingest(f, format!("dimensions {d:?} differ from {:?}", dims.unwrap())));
        }
        frames.push(img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect());
    }
    let (width, height) = dims.map(|(w, h)| (w as usize, h as usize)).unwrap_or_default();

    let mask_dir = path.parent().map(|p| p.join("masks")).filter(|p| p.is_dir());
    let mut annotations = vec![Vec::new(); frames.len()];
    let annotated = mask_dir.is_some();
    if let Some(mask_dir) = mask_dir {
        let masks = image_files(&mask_dir)?;
        if masks.len() != frames.len() {
            return Err(ingest(
                &mask_dir,
                format!("{} masks for {} frames", masks.len(), frames.len()),
            ));
        }
        for (t, f) in masks.iter().enumerate() {
            let img = image::open(f).map_err(|e| ingest(f, e.to_string()))?.to_luma8();
            if img.dimensions() != (width as u32, height as u32) {
                return Err(ingest(f, "mask dimensions differ from frames"));
            }
            annotations[t] = label_map_to_annotations(img.as_raw(), width, height)?;
        }
    }
    Ok((
        SpriteVideo {
            height,
            width,
            frames,
            annotations,
        },
        annotated,
    ))
}

/// Splits a label map into one instance per nonzero label, in label order.
pub(crate) fn label_map_to_annotations(labels: &[u8], width: usize, height: usize) -> Result<Vec<Annotation>> {
    let mut present = [false; 256];
    for &l in labels {
        present[l as usize] = true;
    }
    let mut out = Vec::new();
    for id in 1..256 {
        if !present[id] {
            continue;
        }
        let mask = BinaryMask::new(height, width, labels.iter().map(|&l| l as usize == id).collect())?;
        let bbox = mask_to_box(&mask).expect("label present");
        out.push(Annotation {
            object_id: id as u32,
            mask,
            bbox,
        });
    }
    Ok(out)
}

/// Loads a clip directory holding `frames/`, optional `masks/` and
/// optional `meta.json`.
pub fn load_clip(dir: &Path) -> Result<(SpriteVideo, bool)> {
    let frames = dir.join("frames");
    if frames.is_dir() {
        load_frames_dir(&frames)
    } else {
        load_frames_dir(dir)
    }
}

/// Clip directories under `data_dir`, sorted by name.
pub fn list_clips(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(data_dir).map_err(|e| ingest(data_dir, e.to_string()))?;
    let mut clips: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    clips.sort();
    if clips.is_empty() {
        return Err(ingest(data_dir, "no clip directories with a frames/ subdirectory"));
    }
    Ok(clips)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `frames/%05d.ppm`, `masks/%05d.pgm` and `meta.json`.
pub fn save_clip(dir: &Path, video: &SpriteVideo, meta: &ClipMeta) -> Result<()> {
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&frames_dir)?;
    fs::create_dir_all(&masks_dir)?;
    let (w, h) = (video.width as u32, video.height as u32);
    for (t, frame) in video.frames.iter().enumerate() {
        let mut img = RgbImage::new(w, h);
        for (i, px) in frame.chunks_exact(3).enumerate() {
            let (x, y) = ((i % video.width) as u32, (i / video.width) as u32);
            img.put_pixel(x, y, Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
        }
        img.save(frames_dir.join(format!("{t:05}.ppm")))?;

        let labels = video.label_map(t);
        if labels.iter().any(|&l| l > 255) {
            return Err(Error::contract("object ids above 255 do not fit a label map"));
        }
        let raw = labels.into_iter().map(|l| l as u8).collect();
        let mask = GrayImage::from_raw(w, h, raw).expect("label map size");
        mask.save(masks_dir.join(format!("{t:05}.pgm")))?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sprite_video;

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames_dir(dir.path()), Err(Error::Ingest { .. })));
    }

    #[test]
    fn frames_without_masks() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        fs::create_dir(&frames).unwrap();
        for t in 0..5 {
            RgbImage::from_pixel(8, 8, Rgb([t * 10, 0, 255]))
                .save(frames.join(format!("{t:05}.ppm")))
                .unwrap();
        }
        let (v, annotated) = load_frames_dir(&frames).unwrap();
        assert!(!annotated);
        assert_eq!(v.len(), 5);
        assert!(v.annotations.iter().all(|a| a.is_empty()));
        assert_eq!(v.frames[2][0], 20.0 / 255.0);
        assert_eq!(v.frames[2][2], 1.0);
    }

    #[test]
    fn label_extraction() {
        let mut labels = vec![0u8; 16];
        labels[1] = 1;
        labels[5] = 3;
        labels[6] = 3;
        let anns = label_map_to_annotations(&labels, 4, 4).unwrap();
        let ids: Vec<u32> = anns.iter().map(|a| a.object_id).collect();
        assert_eq!(ids, vec![1, 3]);
        assert_eq!(anns[1].mask.count(), 2);
    }

    #[test]
    fn mismatched_counts_and_dims() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        let masks = dir.path().join("masks");
        fs::create_dir(&frames).unwrap();
        fs::create_dir(&masks).unwrap();
        for t in 0..2 {
            RgbImage::new(8, 8).save(frames.join(format!("{t:05}.ppm"))).unwrap();
        }
        GrayImage::new(8, 8).save(masks.join("00000.pgm")).unwrap();
        assert!(matches!(load_frames_dir(&frames), Err(Error::Ingest { .. })));

        RgbImage::new(8, 9).save(frames.join("00002.ppm")).unwrap();
        let err = load_frames_dir(&frames).unwrap_err();
        assert!(err.to_string().contains("00002.ppm"), "{err}");
    }

    #[test]
    fn generated_clip_round_trip() {
        let cfg = GenConfig::default();
        let v = generate_sprite_video(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = ClipMeta {
            seed: 4,
            config: cfg,
            object_ids: v.object_ids(),
        };
        save_clip(dir.path(), &v, &meta).unwrap();
        let (back, annotated) = load_clip(dir.path()).unwrap();
        assert!(annotated);
        assert_eq!(back.annotations, v.annotations);
        for (a, b) in back.frames.iter().zip(&v.frames) {
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
        let meta_back: ClipMeta =
            serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn clips_listed_in_name_order() {
        let root = tempfile::tempdir().unwrap();
        assert!(list_clips(root.path()).is_err());
        for name in ["b", "a", "c"] {
            fs::create_dir_all(root.path().join(name).join("frames")).unwrap();
        }
        fs::create_dir_all(root.path().join("not_a_clip")).unwrap();
        let names: Vec<_> = list_clips(root.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a", "b", "c"]);
    }
}
