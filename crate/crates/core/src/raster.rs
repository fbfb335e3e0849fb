//! Row-major rasters, PNG conversion and Lanczos-3 resampling.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb as Rgb8, RgbImage as Rgb8Image};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

/// Row-major 2D raster; row 0 is the top of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type RgbImage = Image<Rgb>;
pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    /// Value at signed coordinates, `None` outside the raster.
    #[inline]
    pub fn at(&self, x: i64, y: i64) -> Option<&T> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(&self.data[y as usize * self.width + x as usize])
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Copy of the window `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self>
    where
        T: Clone,
    {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop window {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y).clone()))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }
}

impl RgbImage {
    /// Flattened `[r, g, b, r, g, b, ...]` buffer.
    pub fn to_planar(&self) -> Vec<f32> {
        self.data.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_planar(width: usize, height: usize, flat: &[f32]) -> Result<Self> {
        if flat.len() != width * height * 3 {
            return Err(Error::dims(width * height * 3, flat.len()));
        }
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Image::from_vec(width, height, data)
    }

    pub fn to_rgb8(&self) -> Rgb8Image {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            Rgb8([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        })
    }

    pub fn from_rgb8(img: &Rgb8Image) -> Self {
        Image::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            let p = img.get_pixel(x as u32, y as u32);
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_rgb(&self.to_rgb8())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode_png()?)
    }
}

impl Mask {
    pub fn to_gray8(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if *self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png_gray(&self.to_gray8())
    }

    /// Any non-zero gray level decodes as `true`.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
        Ok(Image::from_fn(
            img.width() as usize,
            img.height() as usize,
            |x, y| img.get_pixel(x as u32, y as u32)[0] > 0,
        ))
    }
}

impl Image<f32> {
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let gray = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([to_u8(*self.get(x as usize, y as usize))])
        });
        encode_png_gray(&gray)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png_rgb(img: &Rgb8Image) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const LANCZOS_LOBES: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Lanczos-3 kernel.
pub fn lanczos3(x: f64) -> f64 {
    if x.abs() < LANCZOS_LOBES {
        sinc(x) * sinc(x / LANCZOS_LOBES)
    } else {
        0.0
    }
}

/// Normalized filter taps for one output sample along an axis of length `src_len`
/// resampled to `dst_len`. Taps outside the source are dropped and the rest
/// renormalized.
fn taps(out: usize, src_len: usize, dst_len: usize) -> (usize, Vec<f64>) {
    let ratio = src_len as f64 / dst_len as f64;
    let scale = ratio.max(1.0);
    let support = LANCZOS_LOBES * scale;
    let center = (out as f64 + 0.5) * ratio - 0.5;
    let lo = ((center - support).floor() as i64).max(0) as usize;
    let hi = ((center + support).ceil() as i64).min(src_len as i64 - 1).max(lo as i64) as usize;
    let mut weights: Vec<f64> = (lo..=hi)
        .map(|i| lanczos3((i as f64 - center) / scale))
        .collect();
    let sum: f64 = weights.iter().sum();
    if sum.abs() > 1e-12 {
        weights.iter_mut().for_each(|w| *w /= sum);
    }
    (lo, weights)
}

/// Separable Lanczos-3 resampling of an interleaved `channels`-plane buffer.
/// No clamping is applied.
pub fn lanczos_resample(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    new_width: usize,
    new_height: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), width * height * channels);
    // horizontal pass
    let mut tmp = vec![0f64; new_width * height * channels];
    let htaps: Vec<_> = (0..new_width).map(|o| taps(o, width, new_width)).collect();
    for y in 0..height {
        for (ox, (lo, w)) in htaps.iter().enumerate() {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * src[(y * width + lo + k) * channels + c] as f64;
                }
                tmp[(y * new_width + ox) * channels + c] = acc;
            }
        }
    }
    // vertical pass
    let vtaps: Vec<_> = (0..new_height).map(|o| taps(o, height, new_height)).collect();
    let mut out = vec![0f32; new_width * new_height * channels];
    for (oy, (lo, w)) in vtaps.iter().enumerate() {
        for x in 0..new_width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    acc += wk * tmp[((lo + k) * new_width + x) * channels + c];
                }
                out[(oy * new_width + x) * channels + c] = acc as f32;
            }
        }
    }
    out
}

pub fn resize_rgb(img: &RgbImage, new_width: usize, new_height: usize) -> RgbImage {
    let out = lanczos_resample(
        &img.to_planar(),
        img.width(),
        img.height(),
        3,
        new_width,
        new_height,
    );
    let mut res = RgbImage::from_planar(new_width, new_height, &out).expect("resample shape");
    for p in res.data_mut() {
        for c in p.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
    }
    res
}

pub fn resize_plane(img: &Image<f32>, new_width: usize, new_height: usize) -> Image<f32> {
    let out = lanczos_resample(img.data(), img.width(), img.height(), 1, new_width, new_height);
    Image::from_vec(new_width, new_height, out).expect("resample shape")
}

/// Pads by edge replication so both dimensions are even.
pub fn pad_to_even<T: Clone>(img: &Image<T>) -> Image<T> {
    let w = img.width() + img.width() % 2;
    let h = img.height() + img.height() % 2;
    Image::from_fn(w, h, |x, y| {
        img.get(x.min(img.width() - 1), y.min(img.height() - 1)).clone()
    })
}

/// Halves both dimensions with Lanczos-3 and clamps to `[0, 1]`. Odd inputs are
/// padded by replication first.
pub fn downsample_ssaa(img: &RgbImage) -> RgbImage {
    if img.width() % 2 == 1 || img.height() % 2 == 1 {
        log::warn!(
            "ssaa input {}x{} has odd dimensions; padding by replication",
            img.width(),
            img.height()
        );
        let padded = pad_to_even(img);
        return resize_rgb(&padded, padded.width() / 2, padded.height() / 2);
    }
    resize_rgb(img, img.width() / 2, img.height() / 2)
}
