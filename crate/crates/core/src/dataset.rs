//! Image/label-map pairs and per-instance records.
//!
//! On disk an image is an 8-bit RGB PNG (TIFF is accepted when reading) and its
//! label map is a 16-bit single-channel PNG whose pixel value is the instance
//! id, `0` meaning background. Pairs follow the `<stem>.png` +
//! `<stem>_label.png` naming convention.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask, Transform};

/// An RGB raster together with its instance label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub id: String,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl LabeledImage {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "pixel buffer holds {} bytes, expected {}x{}x3",
                pixels.len(),
                width,
                height
            )));
        }
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "label buffer holds {} ids, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        Ok(LabeledImage {
            id: id.into(),
            width,
            height,
            pixels,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct nonzero ids, ascending.
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut seen = vec![false; 65536];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    /// Copies the `w`×`h` window at `(x, y)`. Labels keep their ids.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<LabeledImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::OutOfBounds(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        let mut labels = Vec::with_capacity(w * h);
        for row in y..y + h {
            let a = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[a * 3..(a + w) * 3]);
            labels.extend_from_slice(&self.labels[a..a + w]);
        }
        LabeledImage::new(format!("{}@{x},{y}", self.id), w, h, pixels, labels)
    }

    pub fn foreground_mask(&self) -> Mask {
        Mask::from_bits(
            self.width,
            self.height,
            self.labels.iter().map(|&l| l != 0).collect(),
        )
    }
}

/// One annotated nucleus.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub label: u16,
    pub source_id: String,
    /// Tight box in source-image pixels.
    pub bbox: BBox,
    /// Mask over `bbox`.
    pub mask: Mask,
    /// RGB over `bbox`, row-major, 3 bytes per cell.
    pub pixels: Vec<u8>,
    /// Mean of mask-pixel coordinates in source-image pixels.
    pub centroid: (f64, f64),
    pub area: usize,
}

impl Instance {
    /// Applies a flip/rotation about the box. The box keeps its top-left
    /// corner; extents and centroid are recomputed.
    pub fn transformed(&self, t: &Transform) -> Instance {
        if *t == Transform::IDENTITY {
            return self.clone();
        }
        let (w, h) = (self.bbox.w, self.bbox.h);
        let (nw, nh) = t.output_extent(w, h);
        let mut mask = Mask::new(nw, nh);
        let mut pixels = vec![0u8; nw * nh * 3];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = t.map(x, y, w, h);
                mask.set(nx, ny, self.mask.get(x, y));
                let s = (y * w + x) * 3;
                let d = (ny * nw + nx) * 3;
                pixels[d..d + 3].copy_from_slice(&self.pixels[s..s + 3]);
            }
        }
        let (lx, ly) = mask.centroid().expect("instances are non-empty");
        let bbox = BBox {
            x: self.bbox.x,
            y: self.bbox.y,
            w: nw,
            h: nh,
        };
        Instance {
            label: self.label,
            source_id: self.source_id.clone(),
            bbox,
            mask,
            pixels,
            centroid: (bbox.x as f64 + lx, bbox.y as f64 + ly),
            area: self.area,
        }
    }

    /// Centroid relative to the box corner.
    pub fn local_centroid(&self) -> (f64, f64) {
        (
            self.centroid.0 - self.bbox.x as f64,
            self.centroid.1 - self.bbox.y as f64,
        )
    }

    /// Moves the box so the centroid lands on `target`, rounding the shift to
    /// whole pixels. Returns the moved instance.
    pub fn placed_at(&self, target: (i64, i64)) -> Instance {
        let (lx, ly) = self.local_centroid();
        let x = target.0 - lx.round() as i64;
        let y = target.1 - ly.round() as i64;
        let mut out = self.clone();
        out.bbox.x = x;
        out.bbox.y = y;
        out.centroid = (x as f64 + lx, y as f64 + ly);
        out
    }
}

/// One [`Instance`] per distinct nonzero id, ascending by id.
///
/// Disconnected pixels sharing an id stay one instance.
pub fn extract_instances(img: &LabeledImage) -> Vec<Instance> {
    struct Acc {
        min_x: usize,
        min_y: usize,
        max_x: usize,
        max_y: usize,
        n: usize,
        sx: f64,
        sy: f64,
    }
    let mut accs: BTreeMap<u16, Acc> = BTreeMap::new();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = img.label(x, y);
            if l == 0 {
                continue;
            }
            let a = accs.entry(l).or_insert(Acc {
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
                n: 0,
                sx: 0.0,
                sy: 0.0,
            });
            a.min_x = a.min_x.min(x);
            a.min_y = a.min_y.min(y);
            a.max_x = a.max_x.max(x);
            a.max_y = a.max_y.max(y);
            a.n += 1;
            a.sx += x as f64;
            a.sy += y as f64;
        }
    }
    accs.into_iter()
        .map(|(label, a)| {
            let w = a.max_x - a.min_x + 1;
            let h = a.max_y - a.min_y + 1;
            let mut mask = Mask::new(w, h);
            let mut pixels = vec![0u8; w * h * 3];
            for y in 0..h {
                for x in 0..w {
                    let (gx, gy) = (a.min_x + x, a.min_y + y);
                    if img.label(gx, gy) == label {
                        mask.set(x, y, true);
                    }
                    let d = (y * w + x) * 3;
                    pixels[d..d + 3].copy_from_slice(&img.rgb(gx, gy));
                }
            }
            Instance {
                label,
                source_id: img.id.clone(),
                bbox: BBox {
                    x: a.min_x as i64,
                    y: a.min_y as i64,
                    w,
                    h,
                },
                mask,
                pixels,
                centroid: (a.sx / a.n as f64, a.sy / a.n as f64),
                area: a.n,
            }
        })
        .collect()
}

/// Reads an image/label-map pair. The image id is the image file stem.
pub fn load_labeled_image(image_path: &Path, labelmap_path: &Path) -> Result<LabeledImage> {
    let rgb = match open(image_path)? {
        DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::UnsupportedFormat {
                path: image_path.to_path_buf(),
                reason: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let lab = match open(labelmap_path)? {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::UnsupportedFormat {
                path: labelmap_path.to_path_buf(),
                reason: format!("expected 16-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    if rgb.dimensions() != lab.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs label map {}x{}",
            rgb.width(),
            rgb.height(),
            lab.width(),
            lab.height()
        )));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledImage::new(id, w, h, rgb.into_raw(), lab.into_raw())
}

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the image as 8-bit RGB PNG and the labels as 16-bit grayscale PNG.
pub fn save_labeled_image(img: &LabeledImage, image_path: &Path, labelmap_path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let rgb: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, img.pixels.clone())
        .ok_or_else(|| Error::DimensionMismatch("pixel buffer".into()))?;
    let lab: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(w, h, img.labels.clone())
        .ok_or_else(|| Error::DimensionMismatch("label buffer".into()))?;
    write_png(&DynamicImage::ImageRgb8(rgb), image_path)?;
    write_png(&DynamicImage::ImageLuma16(lab), labelmap_path)
}

pub(crate) fn write_png(img: &DynamicImage, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    img.write_to(&mut w, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                source: other,
            },
        })
}

/// Path of the label map paired with `<stem>.png`.
pub fn label_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}_label.png"))
}

/// Lists `(image, label)` pairs in `dir`, sorted by file name. Files ending in
/// `_label.png` are never treated as images.
pub fn discover_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_owned(),
            None => continue,
        };
        let lower = name.to_ascii_lowercase();
        let is_image = lower.ends_with(".png") || lower.ends_with(".tif") || lower.ends_with(".tiff");
        if !is_image || lower.ends_with("_label.png") {
            continue;
        }
        let label = label_path_for(&path);
        if label.is_file() {
            out.push((path, label));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<LabeledImage>> {
    discover_pairs(dir)?
        .iter()
        .map(|(i, l)| load_labeled_image(i, l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: usize, h: usize) -> LabeledImage {
        LabeledImage::new("t", w, h, vec![0; w * h * 3], vec![0; w * h]).unwrap()
    }

    #[test]
    fn symmetric_block_centroid() {
        let mut img = blank(6, 6);
        for y in 2..5 {
            for x in 1..4 {
                img.labels_mut()[y * 6 + x] = 7;
            }
        }
        let inst = extract_instances(&img);
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].label, 7);
        assert_eq!(inst[0].area, 9);
        assert_eq!(inst[0].centroid, (2.0, 3.0));
        assert_eq!(inst[0].bbox, BBox { x: 1, y: 2, w: 3, h: 3 });
    }

    #[test]
    fn all_background_has_no_instances() {
        assert!(extract_instances(&blank(4, 4)).is_empty());
    }

    #[test]
    fn areas_by_pixel_counting() {
        let mut img = blank(8, 8);
        let labels = img.labels_mut();
        // id 1: five cells scattered in a plus shape
        for &(x, y) in &[(1, 1), (0, 1), (2, 1), (1, 0), (1, 2)] {
            labels[y * 8 + x] = 1;
        }
        // id 2: 3x4 block
        for y in 4..8 {
            for x in 4..7 {
                labels[y * 8 + x] = 2;
            }
        }
        let counted: Vec<usize> = [1u16, 2]
            .iter()
            .map(|&id| img.labels().iter().filter(|&&l| l == id).count())
            .collect();
        let inst = extract_instances(&img);
        assert_eq!(inst.iter().map(|i| i.area).collect::<Vec<_>>(), counted);
        assert_eq!(counted, vec![5, 12]);
    }

    #[test]
    fn disconnected_id_is_one_instance() {
        let mut img = blank(5, 1);
        img.labels_mut()[0] = 3;
        img.labels_mut()[4] = 3;
        let inst = extract_instances(&img);
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].bbox.w, 5);
        assert_eq!(inst[0].centroid, (2.0, 0.0));
    }

    #[test]
    fn buffer_size_checked() {
        assert!(matches!(
            LabeledImage::new("x", 2, 2, vec![0; 11], vec![0; 4]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn transformed_instance_keeps_area() {
        let mut img = blank(5, 4);
        for &(x, y) in &[(0, 0), (1, 0), (2, 0), (0, 1)] {
            img.labels_mut()[y * 5 + x] = 1;
        }
        let inst = &extract_instances(&img)[0];
        let t = Transform { flip_h: true, flip_v: true, rot90: 3 };
        let r = inst.transformed(&t);
        assert_eq!(r.area, 4);
        assert_eq!(r.mask.area(), 4);
        assert_eq!((r.bbox.w, r.bbox.h), (2, 3));
        assert!(r.bbox.contains(r.centroid.0, r.centroid.1));
    }
}
