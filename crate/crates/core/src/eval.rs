//! Evaluation harness: rolls the model over clips, turns decoder masks into
//! pixel segmentations and scores them against the annotations.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{extract_features, SpriteVideo};
use crate::error::{Error, Result};
use crate::metrics::{
    corloc, fg_ari, mask_to_box, mbhd, mbo_frames, mbo_video, upsample_labels, BinaryMask, MaskTube,
};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::training::{rollout, Rollout, RolloutConfig};

/// Per-pixel predicted instance labels of a clip plus which labels are live.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    /// One label map per frame.
    pub labels: Vec<Vec<u32>>,
    /// Number of distinct label values (labels are `0..num_labels`).
    pub num_labels: u32,
    /// Live labels per frame; used for the active-slot count.
    pub active: Vec<usize>,
}

impl Segmentation {
    /// Argmax-slot segmentation of a rollout, upsampled to pixels.
    pub fn from_rollout<T: Scalar>(r: &Rollout<T>, grid: (usize, usize), patch: usize) -> Self {
        let labels = r
            .frames
            .iter()
            .map(|f| {
                let l: Vec<u32> = f.decoded.argmax_labels().into_iter().map(|s| s as u32).collect();
                upsample_labels(&l, grid, patch)
            })
            .collect();
        Self {
            height: grid.0 * patch,
            width: grid.1 * patch,
            labels,
            num_labels: r.m_s.first().map_or(0, |v| v.len() as u32),
            active: r.m_s.iter().map(|v| v.iter().filter(|&&b| b).count()).collect(),
        }
    }

    /// The ground truth itself, as an oracle prediction.
    pub fn oracle(video: &SpriteVideo) -> Self {
        let labels: Vec<Vec<u32>> = (0..video.len()).map(|t| video.label_map(t)).collect();
        let num_labels = labels.iter().flatten().copied().max().unwrap_or(0) + 1;
        Self {
            height: video.height,
            width: video.width,
            active: labels.iter().map(|l| count_distinct(l)).collect(),
            labels,
            num_labels,
        }
    }

    fn masks(&self, t: usize) -> Vec<BinaryMask> {
        (0..self.num_labels)
            .map(|l| BinaryMask::from_labels(&self.labels[t], self.height, self.width, l).expect("dims"))
            .filter(|m| !m.is_empty())
            .collect()
    }

    fn tubes(&self) -> Result<Vec<MaskTube>> {
        (0..self.num_labels)
            .map(|l| {
                MaskTube::new(
                    self.labels
                        .iter()
                        .map(|lm| BinaryMask::from_labels(lm, self.height, self.width, l))
                        .collect::<Result<Vec<_>>>()?,
                )
            })
            .collect()
    }
}

fn count_distinct(l: &[u32]) -> usize {
    let mut v = l.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip: String,
    pub frames: usize,
    pub mbo_v: Option<f64>,
    pub mbo_f: Option<f64>,
    pub mbhd: Option<f64>,
    pub fg_ari: Option<f64>,
    pub corloc: Option<f64>,
    pub mean_active_slots: f64,
}

/// Scores a segmentation against the clip's annotations. FG-ARI is the mean
/// over frames that contain foreground.
pub fn score_clip(name: &str, video: &SpriteVideo, seg: &Segmentation) -> Result<ClipReport> {
    if seg.labels.len() != video.len() || seg.height != video.height || seg.width != video.width {
        return Err(Error::contract(format!(
            "segmentation {}x{}x{} vs clip `{name}` {}x{}x{}",
            seg.labels.len(),
            seg.height,
            seg.width,
            video.len(),
            video.height,
            video.width
        )));
    }
    let mut frames = Vec::with_capacity(video.len());
    let mut aris = Vec::new();
    let mut pred_boxes = Vec::new();
    let mut gt_boxes = Vec::new();
    for t in 0..video.len() {
        let gt: Vec<BinaryMask> = video.annotations[t].iter().map(|a| a.mask.clone()).collect();
        let pred = seg.masks(t);
        let gt_labels = video.label_map(t);
        let fg = BinaryMask::new(video.height, video.width, gt_labels.iter().map(|&l| l != 0).collect())?;
        if let Some(a) = fg_ari(&seg.labels[t], &gt_labels, &fg)? {
            aris.push(a);
        }
        pred_boxes.push(pred.iter().filter_map(mask_to_box).collect());
        gt_boxes.push(video.annotations[t].iter().map(|a| a.bbox).collect());
        frames.push((pred, gt));
    }
    let ids: Vec<u32> = {
        let mut v: Vec<u32> = video.object_ids().into_iter().flatten().collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let gt_tubes = ids
        .iter()
        .map(|&id| {
            MaskTube::new(
                (0..video.len())
                    .map(|t| {
                        video.annotations[t]
                            .iter()
                            .find(|a| a.object_id == id)
                            .map_or_else(|| BinaryMask::empty(video.height, video.width), |a| a.mask.clone())
                    })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClipReport {
        clip: name.to_string(),
        frames: video.len(),
        mbo_v: mbo_video(&seg.tubes()?, &gt_tubes)?,
        mbo_f: mbo_frames(&frames)?,
        mbhd: mbhd(&frames)?,
        fg_ari: crate::metrics::mean(&aris),
        corloc: corloc(&pred_boxes, &gt_boxes)?,
        mean_active_slots: seg.active.iter().sum::<usize>() as f64 / seg.active.len().max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub theta: f64,
    pub clips: usize,
    pub mbo_v: Option<f64>,
    pub mbo_f: Option<f64>,
    pub mbhd: Option<f64>,
    pub fg_ari: Option<f64>,
    pub corloc: Option<f64>,
    pub mean_active_slots: f64,
    pub config: serde_json::Value,
}

fn mean_of(reports: &[ClipReport], f: impl Fn(&ClipReport) -> Option<f64>) -> Option<f64> {
    crate::metrics::mean(&reports.iter().filter_map(f).collect::<Vec<_>>())
}

pub fn aggregate(reports: &[ClipReport], theta: f64, config: serde_json::Value) -> AggregateReport {
    AggregateReport {
        theta,
        clips: reports.len(),
        mbo_v: mean_of(reports, |r| r.mbo_v),
        mbo_f: mean_of(reports, |r| r.mbo_f),
        mbhd: mean_of(reports, |r| r.mbhd),
        fg_ari: mean_of(reports, |r| r.fg_ari),
        corloc: mean_of(reports, |r| r.corloc),
        mean_active_slots: mean_of(reports, |r| Some(r.mean_active_slots)).unwrap_or(0.0),
        config,
    }
}

/// Rollout of one clip, timed.
pub struct ClipRun {
    pub rollout: Rollout<f32>,
    pub segmentation: Segmentation,
    pub seconds: f64,
}

pub fn run_clip(model: &Model<f32>, video: &SpriteVideo, cfg: &RolloutConfig) -> Result<ClipRun> {
    let dims = &model.dims;
    if video.height != dims.canvas || video.width != dims.canvas {
        return Err(Error::contract(format!(
            "clip is {}x{} but the checkpoint expects {}x{}",
            video.height, video.width, dims.canvas, dims.canvas
        )));
    }
    let feats: Vec<_> = extract_features::<f32>(&video.frames, video.height, video.width, &model.encoder()?)?
        .into_iter()
        .map(|f| f.x)
        .collect();
    let start = Instant::now();
    let r = rollout(model, &feats, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let segmentation = Segmentation::from_rollout(&r, dims.grid(), dims.patch);
    Ok(ClipRun {
        rollout: r,
        segmentation,
        seconds,
    })
}

/// Results of evaluating a set of clips at one threshold.
pub struct EvalOutcome {
    pub clips: Vec<ClipReport>,
    pub aggregate: AggregateReport,
    /// Mean wall-clock seconds per frame (not part of the reports).
    pub seconds_per_frame: f64,
}

/// Evaluates `clips` and writes `clips.json` and `aggregate.json` to `report`.
/// With `export`, also writes label maps, overlays and soft masks per clip.
pub fn run_eval(
    model: &Model<f32>,
    clips: &[(String, SpriteVideo)],
    cfg: &RolloutConfig,
    config_echo: serde_json::Value,
    report: &Path,
    export: bool,
) -> Result<EvalOutcome> {
    fs::create_dir_all(report)?;
    let mut reports = Vec::with_capacity(clips.len());
    let (mut secs, mut frames) = (0.0, 0usize);
    for (name, video) in clips {
        let run = run_clip(model, video, cfg)?;
        secs += run.seconds;
        frames += video.len();
        reports.push(score_clip(name, video, &run.segmentation)?);
        if export {
            export_masks(&report.join("masks").join(name), video, &run)?;
        }
    }
    let aggregate = aggregate(&reports, cfg.merger.theta, config_echo);
    write_json(&report.join("clips.json"), &reports)?;
    write_json(&report.join("aggregate.json"), &aggregate)?;
    Ok(EvalOutcome {
        clips: reports,
        aggregate,
        seconds_per_frame: secs / frames.max(1) as f64,
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Writes `labels/%05d.pgm`, `overlay/%05d.png` and `soft_masks.bin`
/// (`T × K × N` decoder masks) into `dir`.
pub fn export_masks(dir: &Path, video: &SpriteVideo, run: &ClipRun) -> Result<()> {
    let seg = &run.segmentation;
    let (lab_dir, ov_dir) = (dir.join("labels"), dir.join("overlay"));
    fs::create_dir_all(&lab_dir)?;
    fs::create_dir_all(&ov_dir)?;
    let (h, w) = (seg.height as u32, seg.width as u32);
    for (t, labels) in seg.labels.iter().enumerate() {
        let gray = GrayImage::from_fn(w, h, |x, y| Luma([labels[(y * w + x) as usize].min(255) as u8]));
        gray.save(lab_dir.join(format!("{t:05}.pgm")))?;
        let frame = &video.frames[t];
        let rgb = RgbImage::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            let c = PALETTE[labels[i] as usize % PALETTE.len()];
            Rgb(std::array::from_fn(|ch| {
                let base = (frame[i * 3 + ch].clamp(0.0, 1.0) * 255.0).round();
                (0.5 * base + 0.5 * c[ch] as f32).round() as u8
            }))
        });
        rgb.save(ov_dir.join(format!("{t:05}.png")))?;
    }
    let frames = &run.rollout.frames;
    let (k, n) = (frames[0].decoded.masks.rows(), frames[0].decoded.masks.cols());
    let data: Vec<f32> = frames.iter().flat_map(|f| f.decoded.masks.data().to_vec()).collect();
    write_tensor_file(&dir.join("soft_masks.bin"), &[frames.len(), k, n], &data)
}

const TENSOR_MAGIC: &[u8; 8] = b"SLOTTENS";

/// `SLOTTENS`, u32 version, u32 rank, rank × u64 extents, then f32 values,
/// all little-endian.
pub fn write_tensor_file(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape("write_tensor_file", format!("{shape:?} vs {} values", data.len())));
    }
    let mut buf = Vec::with_capacity(16 + 8 * shape.len() + 4 * data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Ingest {
        path: path.to_path_buf(),
        msg: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("not a tensor file"));
    }
    let rank = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let head = 16 + 8 * rank;
    if bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != head + 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let data = bytes[head..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sprite_video, GenConfig};
    use crate::model::ModelDims;

    fn clip() -> SpriteVideo {
        let cfg = GenConfig {
            canvas: 32,
            clip_len: 3,
            radius_min: 5.0,
            radius_max: 7.0,
            ..GenConfig::default()
        };
        generate_sprite_video(&cfg, 4).unwrap()
    }

    #[test]
    fn oracle_segmentation_scores_perfectly() {
        let v = clip();
        let r = score_clip("c", &v, &Segmentation::oracle(&v)).unwrap();
        assert_eq!(r.mbo_v, Some(1.0));
        assert_eq!(r.mbo_f, Some(1.0));
        assert_eq!(r.fg_ari, Some(1.0));
        assert_eq!(r.mbhd, Some(0.0));
        assert_eq!(r.corloc, Some(100.0));
    }

    #[test]
    fn eval_writes_identical_reports_and_exports() {
        let dims = ModelDims {
            canvas: 32,
            d_feature: 8,
            d_slot: 8,
            k: 3,
            ..ModelDims::tiny()
        };
        let model = Model::<f32>::init(&dims, 0).unwrap();
        let clips = vec![("a".to_string(), clip())];
        let cfg = RolloutConfig { window: 2, ..RolloutConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let oa = run_eval(&model, &clips, &cfg, serde_json::json!({"k": 3}), &a, true).unwrap();
        run_eval(&model, &clips, &cfg, serde_json::json!({"k": 3}), &b, false).unwrap();
        for f in ["clips.json", "aggregate.json"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        assert_eq!(oa.clips.len(), 1);
        let m = a.join("masks/a");
        assert!(m.join("labels/00002.pgm").exists());
        assert!(m.join("overlay/00000.png").exists());
        let (shape, data) = read_tensor_file(&m.join("soft_masks.bin")).unwrap();
        assert_eq!(shape, vec![3, 3, dims.n_patches()]);
        assert_eq!(data.len(), 3 * 3 * dims.n_patches());
    }

    #[test]
    fn wrong_canvas_is_rejected() {
        let model = Model::<f32>::init(&ModelDims::tiny(), 0).unwrap();
        assert!(run_clip(&model, &clip(), &RolloutConfig::default()).is_err());
    }
}
