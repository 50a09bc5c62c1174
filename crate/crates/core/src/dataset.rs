//! Dataset serialization: multi-view samples stored as one directory per
//! sample with 8-bit PNG images, plain-text cameras and 32-bit float PFM
//! disparity maps, plus an index file listing the sample directories.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::{read_camera_file, write_camera_file, CameraModel};
use crate::maps::DisparityMap;
use crate::scalar::Scalar;

/// One multi-view training or evaluation sample. View 0 is the reference.
#[derive(Debug, Clone)]
pub struct MVSample<T> {
    /// 8-bit RGB images, layout [3, H, W].
    pub images: Vec<Array3<u8>>,
    pub cameras: Vec<CameraModel<T>>,
    /// Per-view ground-truth disparity; invalid pixels are encoded as
    /// non-positive or non-finite values.
    pub gt_disparity: Vec<DisparityMap<T>>,
}

impl<T: Scalar> MVSample<T> {
    pub fn view_count(&self) -> usize {
        self.images.len()
    }

    pub fn source_count(&self) -> usize {
        self.view_count() - 1
    }

    /// (width, height) of the images.
    pub fn image_size(&self) -> (usize, usize) {
        let (_, h, w) = self.images[0].dim();
        (w, h)
    }

    pub fn cast<U: Scalar>(&self) -> MVSample<U> {
        MVSample {
            images: self.images.clone(),
            cameras: self.cameras.iter().map(|c| c.cast()).collect(),
            gt_disparity: self.gt_disparity.iter().map(|d| d.cast()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if n < 2 {
            return Err(Error::invalid("a sample needs a reference and at least one source view"));
        }
        if self.cameras.len() != n || self.gt_disparity.len() != n {
            return Err(Error::shape(
                "images, cameras and disparity maps must have matching view counts",
            ));
        }
        Ok(())
    }
}

/// Writes a grayscale PFM ("Pf") file. The negative scale marks the payload
/// little-endian; scanlines are stored bottom-to-top per the format.
pub fn write_pfm(map: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = Vec::with_capacity(64 + 4 * h * w);
    buf.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", w, h).as_bytes());
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&map[[y, x]].to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a grayscale PFM file written by [`write_pfm`] (or any standard
/// single-channel PFM).
pub fn read_pfm(path: &Path) -> Result<Array2<f32>> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    // Header: three whitespace-terminated tokens on three lines.
    let mut pos = 0;
    let mut next_line = |data: &[u8], lineno: usize| -> Result<String> {
        let start = pos;
        while pos < data.len() && data[pos] != b'\n' {
            pos += 1;
        }
        if pos >= data.len() {
            return Err(perr(lineno, "truncated header".into()));
        }
        let line = String::from_utf8_lossy(&data[start..pos]).trim().to_string();
        pos += 1;
        Ok(line)
    };
    let magic = next_line(&data, 1)?;
    if magic != "Pf" {
        return Err(perr(1, format!("expected Pf magic, found {magic:?}")));
    }
    let dims = next_line(&data, 2)?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| perr(2, "bad width".into()))?;
    let h: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| perr(2, "bad height".into()))?;
    let scale: f32 = next_line(&data, 3)?
        .parse()
        .map_err(|_| perr(3, "bad scale".into()))?;
    let little_endian = scale < 0.0;
    let payload = &data[pos..];
    if payload.len() != 4 * w * h {
        return Err(perr(
            4,
            format!("payload holds {} bytes, expected {}", payload.len(), 4 * w * h),
        ));
    }
    let mut map = Array2::zeros((h, w));
    for y in 0..h {
        let src_row = h - 1 - y;
        for x in 0..w {
            let off = 4 * (src_row * w + x);
            let bytes = [
                payload[off],
                payload[off + 1],
                payload[off + 2],
                payload[off + 3],
            ];
            let v = if little_endian {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            map[[y, x]] = v;
        }
    }
    Ok(map)
}

fn write_png(image: &Array3<u8>, path: &Path) -> Result<()> {
    let (c, h, w) = image.dim();
    assert_eq!(c, 3, "images are RGB");
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            rgb.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]]),
            );
        }
    }
    rgb.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        source: e,
    })
}

fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[[ch, y, x]] = p[ch];
            }
        }
    }
    Ok(out)
}

fn view_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes a sample as images/VIEW.png, cams/VIEW.txt and disp/VIEW.pfm.
/// Disparities round-trip bit-exactly; images exactly.
pub fn write_sample(sample: &MVSample<f32>, dir: &Path) -> Result<()> {
    sample.validate()?;
    for sub in ["images", "cams", "disp"] {
        std::fs::create_dir_all(dir.join(sub))
            .map_err(|e| Error::io(dir.join(sub).display().to_string(), e))?;
    }
    for (i, ((img, cam), disp)) in sample
        .images
        .iter()
        .zip(&sample.cameras)
        .zip(&sample.gt_disparity)
        .enumerate()
    {
        let name = view_name(i);
        write_png(img, &dir.join("images").join(format!("{name}.png")))?;
        write_camera_file(cam, &dir.join("cams").join(format!("{name}.txt")))?;
        // Invalid pixels are stored as zero, the non-positive encoding.
        let encoded = Array2::from_shape_fn(disp.data.dim(), |idx| {
            if disp.mask[idx] {
                disp.data[idx]
            } else {
                0.0
            }
        });
        write_pfm(&encoded, &dir.join("disp").join(format!("{name}.pfm")))?;
    }
    Ok(())
}

/// Reads a sample directory written by [`write_sample`].
pub fn read_sample(dir: &Path) -> Result<MVSample<f32>> {
    let images_dir = dir.join("images");
    let mut names: Vec<String> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            name.strip_suffix(".png").map(|s| s.to_string())
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::invalid(format!(
            "no views found in {}",
            images_dir.display()
        )));
    }
    let mut images = Vec::new();
    let mut cameras = Vec::new();
    let mut gt = Vec::new();
    for name in &names {
        let img = read_png(&images_dir.join(format!("{name}.png")))?;
        let (_, h, w) = img.dim();
        let cam_path = dir.join("cams").join(format!("{name}.txt"));
        if !cam_path.exists() {
            return Err(Error::Parse {
                path: cam_path.display().to_string(),
                line: 0,
                msg: format!("missing camera file for view {name}"),
            });
        }
        let cam = read_camera_file::<f32>(&cam_path, (w, h))?;
        let disp = read_pfm(&dir.join("disp").join(format!("{name}.pfm")))?;
        images.push(img);
        cameras.push(cam);
        gt.push(DisparityMap::from_encoded(disp));
    }
    Ok(MVSample {
        images,
        cameras,
        gt_disparity: gt,
    })
}

/// Writes the dataset index: one sample directory name per line.
pub fn write_index(root: &Path, names: &[String]) -> Result<()> {
    let path = root.join("index.txt");
    let mut f =
        std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for n in names {
        writeln!(f, "{n}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Reads the dataset index into sample directory paths.
pub fn read_index(root: &Path) -> Result<Vec<PathBuf>> {
    let path = root.join("index.txt");
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| root.join(l.trim()))
        .collect())
}

/// Loads every sample listed in the dataset index.
pub fn load_dataset(root: &Path) -> Result<Vec<MVSample<f32>>> {
    read_index(root)?.iter().map(|p| read_sample(p)).collect()
}
