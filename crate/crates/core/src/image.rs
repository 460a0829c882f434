//! Planar float images and binary masks.
//!
//! Pixel data is stored channel-major (`c`, then rows, then columns) with
//! values normalized to `[-1, 1]`. Conversions to and from 8-bit RGB rasters
//! use `v = p / 127.5 - 1`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Builds an RGB image from per-pixel colors given in `[-1, 1]`.
    pub fn from_rgb_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::filled(3, height, width, 0.0);
        for y in 0..height {
            for x in 0..width {
                img.set_rgb(y, x, f(y, x));
            }
        }
        img
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let idx = (c * self.height + y) * self.width + x;
        self.data[idx] = v;
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, v: [f32; 3]) {
        for (c, value) in v.into_iter().enumerate() {
            self.set(c, y, x, value);
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn value_range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// True when every value lies in `[-1, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other, "mean abs diff")?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Bilinear resize using half-pixel centers. Equal sizes return a copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let coord = |i: usize, scale: f64, n: usize| -> (usize, usize, f32) {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let rows: Vec<_> = (0..height).map(|y| coord(y, sy, self.height)).collect();
        let cols: Vec<_> = (0..width).map(|x| coord(x, sx, self.width)).collect();
        Image::from_fn(self.channels, height, width, |c, y, x| {
            let (y0, y1, fy) = rows[y];
            let (x0, x1, fx) = cols[x];
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    /// Nearest-neighbour resize; keeps label colors exact.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let map = |i: usize, out: usize, n: usize| ((((i as f64 + 0.5) * n as f64) / out as f64) as usize).min(n - 1);
        Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, map(y, height, self.height), map(x, width, self.width))
        })
    }

    /// Elementwise `self * mask` with the mask broadcast over channels.
    pub fn masked(&self, mask: &Mask) -> Result<Image> {
        mask.ensure_frame(self.height, self.width)?;
        Ok(Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            if mask.get(y, x) {
                self.get(c, y, x)
            } else {
                0.0
            }
        }))
    }

    pub fn concat_channels(&self, other: &Image) -> Result<Image> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "cannot stack {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Image::new(self.channels + other.channels, self.height, self.width, data)
    }

    pub fn channel_range(&self, start: usize, count: usize) -> Result<Image> {
        if start + count > self.channels {
            return Err(Error::Shape(format!(
                "channels {start}..{} out of {}",
                start + count,
                self.channels
            )));
        }
        let plane = self.height * self.width;
        Image::new(
            count,
            self.height,
            self.width,
            self.data[start * plane..(start + count) * plane].to_vec(),
        )
    }

    /// Quantizes one channel value to the 8-bit grid.
    #[inline]
    pub fn to_u8(v: f32) -> u8 {
        ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn from_u8(p: u8) -> f32 {
        (p as f64 / 127.5 - 1.0) as f32
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        Image::from_fn(3, h as usize, w as usize, |c, y, x| {
            Image::from_u8(img.get_pixel(x as u32, y as u32)[c])
        })
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "8-bit export needs 3 channels, image has {}",
                self.channels
            )));
        }
        Ok(image::RgbImage::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([
                    Image::to_u8(self.get(0, y, x)),
                    Image::to_u8(self.get(1, y, x)),
                    Image::to_u8(self.get(2, y, x)),
                ])
            },
        ))
    }

    /// Rounds every value onto the 8-bit grid, matching a save/load cycle.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|&v| Image::from_u8(Image::to_u8(v)))
                .collect(),
            ..self.clone()
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.to_rgb8()?
            .save(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
    }

    /// Stacks images into an `N x C x H x W` tensor.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (c, h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.dims() != (c, h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes {:?} and {:?}",
                    (c, h, w),
                    img.dims()
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Image::batch_to_tensor(&[self], dtype, device)
    }

    /// Splits an `N x C x H x W` tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let per = c * h * w;
        (0..n)
            .map(|i| Image::new(c, h, w, flat[i * per..(i + 1) * per].to_vec()))
            .collect()
    }
}

/// Binary per-pixel mask over an `H x W` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn none(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            data: self.data.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
            ..self.clone()
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
            ..self.clone()
        }
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn ensure_frame(&self, height: usize, width: usize) -> Result<()> {
        if self.height == height && self.width == width {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "mask {}x{} does not match frame {height}x{width}",
                self.height, self.width
            )))
        }
    }

    /// `1 x 1 x H x W` float tensor of zeros and ones.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(data, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.to_luma8()
            .save(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask::from_fn(h as usize, w as usize, |y, x| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        }))
    }
}
