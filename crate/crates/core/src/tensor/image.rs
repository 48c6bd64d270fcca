use super::{Result, Shape, Tensor, TensorError};

/// Interleaved `height x width x channels` image with samples nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TensorError::InvalidShape(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(TensorError::InvalidShape(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        let shape = Shape::new(channels, height, width);
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Planar shape of this image once it is on the tape.
    pub fn planar_shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn to_planar(&self) -> Tensor {
        let shape = self.planar_shape();
        Tensor::from_fn(shape, |c, y, x| self.get(y, x, c))
    }

    pub fn from_planar(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        Self::from_fn(s.height, s.width, s.channels, |y, x, c| t.get(c, y, x))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every sample to the nearest multiple of 1/255 (ties to even) after clamping.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| quantize_sample(v.clamp(0.0, 1.0)))
            .collect();
        Self { data, ..*self }
    }

    pub fn is_quantized(&self) -> bool {
        self.data
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v) && quantize_sample(v) == v)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        self.check_dims("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn abs_diff(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.check_dims("abs_diff", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .collect();
        Ok(Self { data, ..*self })
    }

    /// 8-bit samples, interleaved; assumes a quantized image.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Replicates a single-channel image into three channels; three-channel input is cloned.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self {
            data,
            channels: 3,
            ..*self
        }
    }

    pub(crate) fn check_dims(&self, op: &'static str, other: &ImageTensor) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.planar_shape(),
                rhs: other.planar_shape(),
            })
        }
    }
}

fn quantize_sample(v: f64) -> f64 {
    (v * 255.0).round_ties_even() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_roundtrip_preserves_layout() {
        let img = ImageTensor::from_fn(2, 3, 3, |y, x, c| (y * 100 + x * 10 + c) as f64).unwrap();
        let t = img.to_planar();
        assert_eq!(t.shape(), Shape::new(3, 2, 3));
        assert_eq!(t.get(2, 1, 0), 102.0);
        assert_eq!(ImageTensor::from_planar(&t).unwrap(), img);
    }

    #[test]
    fn quantization_ties_go_to_even() {
        let img = ImageTensor::new(1, 3, 1, vec![0.5 / 255.0, 1.5 / 255.0, 2.5 / 255.0]).unwrap();
        let q = img.quantized();
        assert_eq!(q.to_u8(), vec![0, 2, 2]);
        assert!(q.is_quantized());
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImageTensor::new(0, 1, 1, vec![]).is_err());
    }
}
