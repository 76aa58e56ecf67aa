use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Dense `H × W × C` image with unit-range intensities (not enforced).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0 && channels > 0, "image dimensions must be positive, got {height}x{width}x{channels}");
        ensure!(data.len() == height * width * channels, "{}x{}x{} image needs {} values, got {}", height, width, channels, height * width * channels, data.len());
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self { height: self.height, width: self.width, channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clip_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// One `H × W` plane per channel.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        ensure!(!planes.is_empty(), "no planes");
        let c = planes.len();
        let mut data = vec![0.0; height * width * c];
        for (ci, p) in planes.iter().enumerate() {
            ensure!(p.len() == height * width, "plane {ci} has {} values, expected {}", p.len(), height * width);
            for (i, &v) in p.iter().enumerate() {
                data[i * c + ci] = v;
            }
        }
        Image::new(height, width, c, data)
    }
}

/// Packs images into an `(N, C, H, W)` tensor.
pub fn to_batch(images: &[Image]) -> Result<Tensor<f32>> {
    ensure!(!images.is_empty(), "empty image batch");
    let (h, w, c) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        ensure!(img.dims() == (h, w, c), "mixed image sizes in batch: {:?} vs {:?}", img.dims(), (h, w, c));
        for ch in 0..c {
            data.extend(img.data.iter().skip(ch).step_by(c));
        }
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Unpacks an `(N, C, H, W)` tensor, or any tensor with `N·H·W·C` elements, into images.
pub fn from_batch<R: crate::numerics::Real>(t: &Tensor<R>, h: usize, w: usize, c: usize) -> Result<Vec<Image>> {
    ensure!(t.rank() >= 1, "scalar cannot be unpacked into images");
    let n = t.shape()[0];
    ensure!(t.len() == n * h * w * c, "tensor {:?} does not hold {n} images of {h}x{w}x{c}", t.shape());
    let d = t.data();
    let per = h * w * c;
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let src = &d[b * per..(b + 1) * per];
        let mut data = vec![0.0; per];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = src[ch * h * w + p].to_f64() as f32;
            }
        }
        out.push(Image::new(h, w, c, data)?);
    }
    Ok(out)
}

/// Binary 8-bit PGM (1 channel) or PPM (3 channels). Values are clipped and rounded.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(crate::Error::contract(format!("PNM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| crate::Error::Format(format!("PNM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?.to_string());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit rasters are supported"));
    }
    let raster = bytes.get(pos..pos + w * h * channels).ok_or_else(|| bad("truncated raster"))?;
    Image::new(h, w, channels, raster.iter().map(|&b| b as f32 / maxval as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_round_trip_preserves_layout() {
        let a = Image::from_fn(2, 3, 2, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let b = a.map(|v| v + 0.5);
        let t = to_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2, 3]);
        // channel 1 of image 0 starts after the 6 values of channel 0
        assert_eq!(t.data()[6], 1.0);
        assert_eq!(from_batch(&t, 2, 3, 2).unwrap(), vec![a, b]);
    }

    #[test]
    fn pnm_round_trip_on_the_8_bit_grid() {
        for c in [1, 3] {
            let a = Image::from_fn(5, 7, c, |y, x, ch| ((y * 7 + x + ch * 11) % 256) as f32 / 255.0);
            let back = decode_pnm(&encode_pnm(&a).unwrap()).unwrap();
            assert_eq!(back.dims(), a.dims());
            assert!(back.data().iter().zip(a.data()).all(|(p, q)| (p - q).abs() < 1e-6));
        }
        assert!(encode_pnm(&Image::filled(2, 2, 2, 0.0)).is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
