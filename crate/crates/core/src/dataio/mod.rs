//! On-disk dataset layout:
//!
//! ```text
//! <ds>/manifest
//! <ds>/seq-NN/frame-NNNNNN.color.png   8-bit RGB
//! <ds>/seq-NN/frame-NNNNNN.depth.png   16-bit gray, millimetres, 0 = invalid
//! <ds>/seq-NN/frame-NNNNNN.label.png   8-bit gray class ids
//! <ds>/seq-NN/frame-NNNNNN.pose.txt    4x4 camera-to-world matrix
//! ```

mod config;
mod loaded;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

pub use config::{parse_config, read_config, RunConfig};
pub use loaded::{LoadedFrame, LoadedSequence, SplitData};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{CameraIntrinsics, HomogeneousTransform, Pose};
use crate::synthworld::RenderedFrame;

pub const MANIFEST_FORMAT: &str = "mtloc-dataset";
pub const MANIFEST_VERSION: u32 = 1;

/// Largest depth representable in 16-bit millimetres.
pub const MAX_DEPTH_M: f64 = 65.535;

const ORTHO_TOL: f64 = 1e-6;
const LAST_ROW_TOL: f64 = 1e-9;

/// One 4x4 matrix row per line, 17 significant digits.
pub fn format_pose(pose: &Pose) -> String {
    let m = pose.to_transform().0;
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(s, "{}", cells.join(" ")).unwrap();
    }
    s
}

pub fn parse_pose(text: &str, path: &Path) -> Result<Pose> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != 4 {
        return Err(Error::parse(path, format!("expected 4 matrix lines, found {}", lines.len())));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, line) in lines.iter().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 4 {
            return Err(Error::parse(
                path,
                format!("line {}: expected 4 values, found {}", i + 1, tokens.len()),
            ));
        }
        for (j, tok) in tokens.iter().enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: `{tok}` is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("line {}: non-finite value", i + 1)));
            }
            m[i][j] = v;
        }
    }
    let t = HomogeneousTransform::validated(m, ORTHO_TOL, LAST_ROW_TOL)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(Pose::from_transform(&t))
}

pub fn write_pose_file(path: &Path, pose: &Pose) -> Result<()> {
    fsutil::write_atomic(path, format_pose(pose).as_bytes())
}

pub fn parse_pose_file(path: &Path) -> Result<Pose> {
    parse_pose(&fsutil::read_string(path)?, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("split must be `train` or `test`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub label: PathBuf,
    pub pose: Pose,
}

impl FrameRecord {
    /// Paths for frame `index` of sequence directory `dir`; the pose is
    /// filled in by the caller.
    pub fn at(dir: &Path, index: usize, pose: Pose) -> FrameRecord {
        let stem = format!("frame-{index:06}");
        FrameRecord {
            index,
            rgb: dir.join(format!("{stem}.color.png")),
            depth: dir.join(format!("{stem}.depth.png")),
            label: dir.join(format!("{stem}.label.png")),
            pose,
        }
    }

    pub fn pose_path(&self) -> PathBuf {
        self.rgb.with_file_name(format!("frame-{:06}.pose.txt", self.index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub name: String,
    pub split: Split,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    /// Class names, indexed by id.
    pub classes: Vec<String>,
    /// Display colour per class.
    pub palette: Vec<[u8; 3]>,
    /// Side length of the square world, metres.
    pub extent: f64,
    pub seed: u64,
    pub sequences: Vec<SequenceRecord>,
}

impl DatasetIndex {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest")
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn manifest_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::new();
        writeln!(s, "format {MANIFEST_FORMAT}").unwrap();
        writeln!(s, "version {MANIFEST_VERSION}").unwrap();
        writeln!(s, "size {} {}", k.width, k.height).unwrap();
        writeln!(s, "intrinsics {:?} {:?} {:?} {:?}", k.fx, k.fy, k.cx, k.cy).unwrap();
        writeln!(s, "extent {:?}", self.extent).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        for (name, c) in self.classes.iter().zip(&self.palette) {
            writeln!(s, "class {name} {} {} {}", c[0], c[1], c[2]).unwrap();
        }
        for seq in &self.sequences {
            writeln!(s, "sequence {} {} {}", seq.name, seq.split.as_str(), seq.frames.len()).unwrap();
        }
        s
    }

    pub fn write_manifest(&self) -> Result<()> {
        fsutil::write_atomic(&DatasetIndex::manifest_path(&self.root), self.manifest_text().as_bytes())
    }

    /// Reads the manifest and every pose file, checking that all frame files
    /// exist.
    pub fn load(root: &Path) -> Result<DatasetIndex> {
        let path = DatasetIndex::manifest_path(root);
        let text = fsutil::read_string(&path)?;
        let bad = |line: usize, msg: String| Error::parse(&path, format!("line {line}: {msg}"));
        let mut format_ok = false;
        let mut size = None;
        let mut intr = None;
        let mut extent = None;
        let mut seed = 0;
        let mut classes = Vec::new();
        let mut palette = Vec::new();
        let mut seqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            let Some((&key, rest)) = f.split_first() else { continue };
            let nums = |count: usize| -> Result<Vec<f64>> {
                if rest.len() != count {
                    return Err(bad(n, format!("`{key}` expects {count} values")));
                }
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| bad(n, format!("`{t}` is not a number"))))
                    .collect()
            };
            match key {
                "format" => {
                    if rest != [MANIFEST_FORMAT] {
                        return Err(bad(n, format!("not a {MANIFEST_FORMAT} manifest")));
                    }
                    format_ok = true;
                }
                "version" => {
                    if rest != [MANIFEST_VERSION.to_string().as_str()] {
                        return Err(bad(n, format!("unsupported version {rest:?}")));
                    }
                }
                "size" => {
                    let v = nums(2)?;
                    size = Some((v[0] as usize, v[1] as usize));
                }
                "intrinsics" => intr = Some(nums(4)?),
                "extent" => extent = Some(nums(1)?[0]),
                "seed" => {
                    seed = rest
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad(n, "bad seed".into()))?
                }
                "class" => {
                    if rest.len() != 4 {
                        return Err(bad(n, "`class` expects a name and 3 colour values".into()));
                    }
                    let rgb: Vec<u8> = rest[1..]
                        .iter()
                        .map(|t| t.parse::<u8>().map_err(|_| bad(n, format!("bad colour `{t}`"))))
                        .collect::<Result<_>>()?;
                    classes.push(rest[0].to_string());
                    palette.push([rgb[0], rgb[1], rgb[2]]);
                }
                "sequence" => {
                    if rest.len() != 3 {
                        return Err(bad(n, "`sequence` expects name, split and frame count".into()));
                    }
                    let split: Split = rest[1].parse().map_err(|e: Error| bad(n, e.to_string()))?;
                    let count: usize = rest[2].parse().map_err(|_| bad(n, format!("bad frame count `{}`", rest[2])))?;
                    seqs.push((rest[0].to_string(), split, count));
                }
                _ => return Err(bad(n, format!("unknown key `{key}`"))),
            }
        }
        if !format_ok {
            return Err(Error::parse(&path, format!("missing `format {MANIFEST_FORMAT}` line")));
        }
        let (w, h) = size.ok_or_else(|| Error::parse(&path, "missing `size`"))?;
        let v = intr.ok_or_else(|| Error::parse(&path, "missing `intrinsics`"))?;
        let intrinsics = CameraIntrinsics::new(v[0], v[1], v[2], v[3], w, h).map_err(|e| Error::parse(&path, e.to_string()))?;
        let extent = extent.ok_or_else(|| Error::parse(&path, "missing `extent`"))?;
        if classes.is_empty() {
            return Err(Error::parse(&path, "no classes declared"));
        }
        let mut sequences = Vec::new();
        for (name, split, count) in seqs {
            let dir = root.join(&name);
            let mut frames = Vec::with_capacity(count);
            for index in 0..count {
                let mut rec = FrameRecord::at(&dir, index, Pose::IDENTITY);
                for p in [&rec.rgb, &rec.depth, &rec.label] {
                    if !p.is_file() {
                        return Err(Error::Dataset(format!("missing frame file {}", p.display())));
                    }
                }
                rec.pose = parse_pose_file(&rec.pose_path())?;
                frames.push(rec);
            }
            sequences.push(SequenceRecord { name, split, frames });
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            intrinsics,
            classes,
            palette,
            extent,
            seed,
            sequences,
        })
    }
}

/// Metres to stored millimetres; invalid or out-of-range depth becomes 0.
pub fn depth_to_mm(d: f64) -> u16 {
    if !(d.is_finite() && d > 0.0) {
        return 0;
    }
    let mm = (d * 1000.0).round();
    if mm > u16::MAX as f64 {
        0
    } else {
        mm as u16
    }
}

pub fn mm_to_depth(mm: u16) -> f64 {
    mm as f64 / 1000.0
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| image_err(path, e))?;
    fsutil::write_atomic(path, buf.get_ref())
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fsutil::read(path)?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

fn check_dims(path: &Path, got: (u32, u32), want: (usize, usize)) -> Result<()> {
    if (got.0 as usize, got.1 as usize) != want {
        return Err(Error::Dataset(format!(
            "{}: image is {}x{}, manifest says {}x{}",
            path.display(),
            got.0,
            got.1,
            want.0,
            want.1
        )));
    }
    Ok(())
}

/// Writes the three images of `rec`. The pose file is written separately
/// with [`write_pose_file`]; matrix-to-quaternion conversion is not an exact
/// fixed point, so rewriting a pose read back from disk could change it.
pub fn write_frame(rec: &FrameRecord, frame: &RenderedFrame) -> Result<()> {
    let (w, h) = (frame.width as u32, frame.height as u32);
    let rgb = RgbImage::from_fn(w, h, |x, y| {
        let i = (y as usize * frame.width + x as usize) * 3;
        let px = &frame.rgb.data()[i..i + 3];
        image::Rgb([0, 1, 2].map(|c| (px[c].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    encode_png(&rgb, &rec.rgb)?;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
        Luma([depth_to_mm(frame.depth.data()[y as usize * frame.width + x as usize])])
    });
    encode_png(&depth, &rec.depth)?;
    let labels = GrayImage::from_fn(w, h, |x, y| Luma([frame.labels[y as usize * frame.width + x as usize]]));
    encode_png(&labels, &rec.label)
}

/// Reads a frame, checking its size against `(width, height)` from the
/// manifest. Depth is in metres with 0 marking invalid pixels.
pub fn read_frame(rec: &FrameRecord, width: usize, height: usize) -> Result<RenderedFrame> {
    let rgb_img = decode(&rec.rgb)?.into_rgb8();
    check_dims(&rec.rgb, rgb_img.dimensions(), (width, height))?;
    let depth_img = decode(&rec.depth)?.into_luma16();
    check_dims(&rec.depth, depth_img.dimensions(), (width, height))?;
    let label_img = decode(&rec.label)?.into_luma8();
    check_dims(&rec.label, label_img.dimensions(), (width, height))?;
    let rgb = rgb_img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let depth = depth_img.as_raw().iter().map(|&v| mm_to_depth(v)).collect();
    Ok(RenderedFrame {
        width,
        height,
        rgb: Tensor::new(vec![height, width, 3], rgb)?,
        depth: Tensor::new(vec![height, width], depth)?,
        labels: label_img.into_raw(),
        pose: rec.pose,
    })
}
