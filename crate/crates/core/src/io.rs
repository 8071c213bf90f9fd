//! Frame ingestion and CSV reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::prior::SpikeSlabPrior;
use crate::tensor::Tensor;
use crate::train::Evaluation;

/// Frames of one instance in filename order.
#[derive(Clone, Debug)]
pub struct InstanceSet {
    pub source: PathBuf,
    pub names: Vec<String>,
    pub frames: Vec<Tensor>,
    pub source_fps: Option<f64>,
    pub target_fps: Option<f64>,
}

impl InstanceSet {
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.shape()[2], f.shape()[3]))
    }
}

/// Keep-every-`k` factor whose rate `source / k` is closest to `target`.
/// Equal distances resolve to the larger `k`.
pub fn subsample_factor(source_fps: f64, target_fps: f64) -> Result<usize> {
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {source_fps} and {target_fps}")));
    }
    let ratio = source_fps / target_fps;
    let lo = (ratio.floor() as usize).max(1);
    let hi = (ratio.ceil() as usize).max(1);
    let err = |k: usize| (source_fps / k as f64 - target_fps).abs();
    Ok(if err(lo) < err(hi) { lo } else { hi })
}

fn format_of(path: &Path) -> Option<ImageFormat> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(ImageFormat::Png),
        "ppm" | "pnm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Image files in `folder`, sorted by name.
pub fn list_frames(folder: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(folder)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && format_of(p).is_some())
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads an 8-bit PNG or PPM as `[1, 3, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let format = format_of(path).ok_or_else(|| Error::Dataset(format!("{}: unsupported format (PNG or PPM expected)", path.display())))?;
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("image shape")
}

/// Rounds `[1, 3, H, W]` values in `[0, 1]` to 8 bits.
pub fn tensor_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let [_, c, h, w] = x.dims4("tensor_to_rgb")?;
    if c != 3 {
        return Err(crate::error::shape_err("tensor_to_rgb", format!("{c} channels")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let v = |ch: usize| (x.data()[(ch * h + py as usize) * w + px as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([v(0), v(1), v(2)])
    }))
}

/// Writes a frame as PNG through a temp file.
pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    let img = tensor_to_rgb(x)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    crate::checkpoint::write_atomic(path, &buf.into_inner())
}

/// Loads every frame of `folder`, keeping every `k`-th one when both rates are given.
pub fn load_instance(folder: &Path, source_fps: Option<f64>, target_fps: Option<f64>) -> Result<InstanceSet> {
    let paths = list_frames(folder)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("{}: no PNG or PPM frames", folder.display())));
    }
    let k = match (source_fps, target_fps) {
        (Some(s), Some(t)) => subsample_factor(s, t)?,
        (None, Some(_)) => return Err(Error::Config("target fps given without source fps".into())),
        _ => 1,
    };
    let mut frames = Vec::new();
    let mut names = Vec::new();
    for p in paths.iter().step_by(k) {
        let f = load_image(p)?;
        if let Some(first) = frames.first() {
            let first: &Tensor = first;
            if first.shape() != f.shape() {
                return Err(Error::Dataset(format!(
                    "{}: {:?} differs from {:?}",
                    p.display(),
                    &f.shape()[2..],
                    &first.shape()[2..]
                )));
            }
        }
        names.push(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        frames.push(f);
    }
    Ok(InstanceSet {
        source: folder.to_path_buf(),
        names,
        frames,
        source_fps,
        target_fps,
    })
}

/// Loads every readable image of `folder`; unreadable files are returned
/// separately so the caller can warn about them.
pub fn load_training_images(folder: &Path) -> Result<(Vec<Tensor>, Vec<(PathBuf, Error)>)> {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for p in list_frames(folder)? {
        match load_image(&p) {
            Ok(t) => ok.push(t),
            Err(e) => skipped.push((p, e)),
        }
    }
    if ok.is_empty() {
        return Err(Error::Dataset(format!("{}: no usable training images", folder.display())));
    }
    Ok((ok, skipped))
}

/// One line of an experiment report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub beta: f64,
    pub variant: String,
    pub step: usize,
    pub rate_bpp: f64,
    pub model_rate_bpp: f64,
    pub zero_model_rate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub bits_per_param: f64,
    pub kb_per_frame: f64,
}

impl ReportRow {
    /// Row for an evaluation of `frames` frames with `params` receiver parameters.
    pub fn from_eval(experiment: &str, variant: &str, step: usize, e: &Evaluation, frames: usize, params: usize) -> Self {
        Self {
            experiment: experiment.to_string(),
            beta: e.beta,
            variant: variant.to_string(),
            step,
            rate_bpp: e.rate_bpp(),
            model_rate_bpp: e.model_rate_bpp(),
            zero_model_rate_bpp: e.zero_model_rate_bpp(),
            mse: e.mse,
            psnr: e.psnr(),
            bits_per_param: if params == 0 { 0.0 } else { e.model_bits / params as f64 },
            kb_per_frame: (e.rate_bits + e.model_bits) / 8.0 / 1000.0 / frames.max(1) as f64,
        }
    }
}

pub const REPORT_HEADER: &str =
    "experiment,beta,variant,step,rate_bpp,model_rate_bpp,zero_model_rate_bpp,mse,psnr,bits_per_param,kb_per_frame";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment, r.beta, r.variant, r.step, r.rate_bpp, r.model_rate_bpp, r.zero_model_rate_bpp, r.mse, r.psnr, r.bits_per_param, r.kb_per_frame
        );
    }
    s
}

/// Update histogram of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupHistogram {
    pub group: ParamGroup,
    pub params: usize,
    pub counts: Vec<u64>,
    pub bits: f64,
}

/// Per-group bin counts and discrete model bits of a quantized update.
pub fn update_histograms(update: &[f64], groups: &[ParamGroup], prior: &SpikeSlabPrior) -> Result<Vec<GroupHistogram>> {
    if update.len() != groups.len() {
        return Err(Error::UpdateMismatch(format!("{} updates for {} parameters", update.len(), groups.len())));
    }
    ParamGroup::RECEIVER
        .iter()
        .map(|&group| {
            let vals: Vec<f64> = update.iter().zip(groups).filter(|(_, g)| **g == group).map(|(v, _)| *v).collect();
            let counts = prior.bin_counts(&vals)?;
            Ok(GroupHistogram {
                group,
                params: vals.len(),
                bits: prior.rate_from_counts(&counts),
                counts,
            })
        })
        .collect()
}

/// Long-form CSV: `group,bin,center,count` for every bin of every group.
pub fn histogram_csv(hists: &[GroupHistogram], prior: &SpikeSlabPrior) -> String {
    let centers = prior.grid().centers();
    let mut s = String::from("group,bin,center,count\n");
    for h in hists {
        for (i, (c, n)) in centers.iter().zip(&h.counts).enumerate() {
            let _ = writeln!(s, "{},{i},{c},{n}", h.group.name());
        }
    }
    s
}

/// `group,params,nonzero,bits,bits_per_param,bpp` with a final `total` row.
pub fn group_bits_csv(hists: &[GroupHistogram], prior: &SpikeSlabPrior, pixels: usize) -> String {
    let center = prior.bins() / 2;
    let mut s = String::from("group,params,nonzero,bits,bits_per_param,bpp\n");
    let (mut params, mut nonzero, mut bits) = (0usize, 0u64, 0.0);
    let px = pixels.max(1) as f64;
    for h in hists {
        let nz: u64 = h.counts.iter().sum::<u64>() - h.counts[center];
        let bpp_param = if h.params == 0 { 0.0 } else { h.bits / h.params as f64 };
        let _ = writeln!(s, "{},{},{nz},{},{bpp_param},{}", h.group.name(), h.params, h.bits, h.bits / px);
        params += h.params;
        nonzero += nz;
        bits += h.bits;
    }
    let _ = writeln!(s, "total,{params},{nonzero},{bits},{},{}", bits / params.max(1) as f64, bits / px);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampling_factors() {
        assert_eq!(subsample_factor(30.0, 2.0).unwrap(), 15);
        assert_eq!(subsample_factor(25.0, 2.0).unwrap(), 13);
        assert_eq!(subsample_factor(50.0, 2.0).unwrap(), 25);
        assert_eq!(subsample_factor(1.0, 2.0).unwrap(), 1);
        // 30/7 and 30/8 are 0.29 and 0.25 away from 4
        assert_eq!(subsample_factor(30.0, 4.0).unwrap(), 8);
        assert!(subsample_factor(0.0, 2.0).is_err());
    }

    #[test]
    fn image_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::new(vec![1, 3, 2, 3], (0..18).map(|i| i as f64 * 15.0 / 255.0).collect()).unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, &x).unwrap();
        let y = load_image(&p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_loading_rules() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..31 {
            let v = i as f64 / 40.0;
            save_png(&dir.path().join(format!("f{i:03}.png")), &Tensor::full(&[1, 3, 4, 4], v)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let all = load_instance(dir.path(), None, None).unwrap();
        assert_eq!(all.frames.len(), 31);
        let sub = load_instance(dir.path(), Some(30.0), Some(2.0)).unwrap();
        assert_eq!(sub.names, ["f000.png", "f015.png", "f030.png"]);

        save_png(&dir.path().join("f999.png"), &Tensor::full(&[1, 3, 4, 5], 0.0)).unwrap();
        assert!(matches!(load_instance(dir.path(), None, None), Err(Error::Dataset(_))));
        assert!(matches!(load_image(&dir.path().join("notes.txt")), Err(Error::Dataset(_))));
    }

    #[test]
    fn ppm_frames_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&p, bytes).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn group_bits_sum_to_total() {
        let prior = SpikeSlabPrior::standard();
        let groups: Vec<ParamGroup> = (0..500).map(|i| ParamGroup::RECEIVER[i % 5]).collect();
        let update: Vec<f64> = (0..500).map(|i| if i % 7 == 0 { 0.01 } else { 0.0 }).collect();
        let hists = update_histograms(&update, &groups, &prior).unwrap();
        assert!(hists.iter().all(|h| h.counts.len() == 59));
        let sum: f64 = hists.iter().map(|h| h.bits).sum();
        assert!((sum - prior.model_rate_discrete(&update).unwrap()).abs() < 1e-9);
        let csv = group_bits_csv(&hists, &prior, 1000);
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(histogram_csv(&hists, &prior).lines().count(), 1 + 5 * 59);
    }
}
