//! Owned 8-bit raster images and the integer resampling used everywhere else.
//!
//! Resampling is pixel-centre bilinear computed in exact integer arithmetic,
//! so results are platform independent and resizing to the native size is
//! the identity.

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

/// Row-major 8-bit single-channel luma image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * 3],
        }
    }

    /// Wraps an interleaved RGB buffer. Returns `None` when the length does
    /// not match `width * height * 3` or a dimension is zero.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (width > 0 && height > 0 && data.len() == width as usize * height as usize * 3).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, px: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// ITU-R 601 luma, `round(0.299 R + 0.587 G + 0.114 B)` with half-up
    /// rounding, evaluated in integers.
    pub fn to_gray(&self) -> GrayImage {
        let data = self.data.chunks_exact(3).map(|c| luma(c[0], c[1], c[2])).collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn resize(&self, width: u32, height: u32) -> RgbImage {
        let data = resize_bilinear(&self.data, self.width, self.height, 3, width, height);
        RgbImage { width, height, data }
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (width > 0 && height > 0 && data.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_raw(width, height, data).expect("dimensions must be positive")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    /// Edge-clamped read with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as u32;
        let y = y.clamp(0, self.height as i64 - 1) as u32;
        self.get(x, y)
    }

    pub fn resize(&self, width: u32, height: u32) -> GrayImage {
        let data = resize_bilinear(&self.data, self.width, self.height, 1, width, height);
        GrayImage { width, height, data }
    }

    /// Rotates by 90 degrees clockwise (in image coordinates, y pointing down).
    pub fn rotate90(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        GrayImage::from_fn(h, w, |x, y| self.get(y, h - 1 - x))
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}

/// Source sample position for destination index `d` along one axis, as an
/// integer part and a fractional numerator over `2 * dst_len`.
#[inline]
fn source_coord(d: u32, src_len: u32, dst_len: u32) -> (usize, usize, u64, u64) {
    // src = (d + 0.5) * src_len / dst_len - 0.5, kept as a rational.
    let denom = 2 * dst_len as u64;
    let num = (2 * d as i64 + 1) * src_len as i64 - dst_len as i64;
    let num = num.max(0) as u64;
    let i0 = (num / denom) as usize;
    let frac = num % denom;
    let i0 = i0.min(src_len as usize - 1);
    let i1 = (i0 + 1).min(src_len as usize - 1);
    (i0, i1, frac, denom)
}

fn resize_bilinear(src: &[u8], sw: u32, sh: u32, channels: usize, dw: u32, dh: u32) -> Vec<u8> {
    assert!(dw > 0 && dh > 0, "target dimensions must be positive");
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let xs: Vec<_> = (0..dw).map(|x| source_coord(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw as usize * dh as usize * channels);
    let stride = sw as usize * channels;
    for y in 0..dh {
        let (y0, y1, fy, dy) = source_coord(y, sh, dh);
        let wy0 = dy - fy;
        let wy1 = fy;
        for &(x0, x1, fx, dx) in &xs {
            let wx0 = dx - fx;
            let wx1 = fx;
            let total = dx * dy;
            for c in 0..channels {
                let p = |xx: usize, yy: usize| src[yy * stride + xx * channels + c] as u64;
                let acc = wy0 * (wx0 * p(x0, y0) + wx1 * p(x1, y0)) + wy1 * (wx0 * p(x0, y1) + wx1 * p(x1, y1));
                out.push(((acc + total / 2) / total) as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_of_primaries() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(255, 0, 0), 76);
        assert_eq!(luma(0, 255, 0), 150);
        assert_eq!(luma(0, 0, 255), 29);
    }

    #[test]
    fn native_resize_is_identity() {
        let img = GrayImage::from_fn(17, 9, |x, y| (x * 13 + y * 7) as u8);
        assert_eq!(img.resize(17, 9), img);
    }

    #[test]
    fn halving_averages_pairs() {
        let img = GrayImage::from_fn(4, 2, |x, _| [0, 10, 20, 31][x as usize]);
        let half = img.resize(2, 1);
        // (0+10)/2 = 5, (20+31)/2 = 25.5 -> 26 (half up)
        assert_eq!(half.as_raw(), &[5, 26]);
    }

    #[test]
    fn resize_hits_target_dims() {
        let img = RgbImage::new(100, 80);
        let r = img.resize(32, 32);
        assert_eq!((r.width(), r.height()), (32, 32));
        assert_eq!(r.as_raw().len(), 32 * 32 * 3);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let img = GrayImage::from_fn(3, 3, |_, _| 77);
        assert!(img.resize(11, 5).as_raw().iter().all(|&v| v == 77));
    }

    #[test]
    fn rotate90_four_times_is_identity() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 31 + y * 3) as u8);
        let r = img.rotate90();
        assert_eq!((r.width(), r.height()), (3, 5));
        assert_eq!(r.rotate90().rotate90().rotate90(), img);
    }
}
