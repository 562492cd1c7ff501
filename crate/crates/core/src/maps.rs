//! Single-channel map types shared by the metric suite and the data pipeline.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// H x W saliency map with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Metric(format!(
                "saliency map {height}x{width} expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Metric("saliency values must lie in [0, 1]".into()));
        }
        Ok(SaliencyMap {
            height,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Take the first (batch, channel) plane of a tensor as a map, clamping
    /// tiny numeric excursions outside [0, 1].
    pub fn from_tensor<E: Element>(t: &Tensor4<E>) -> Self {
        let s = t.shape();
        let plane = s.spatial();
        let data = t.data()[..plane]
            .iter()
            .map(|v| v.into_f64().clamp(0.0, 1.0))
            .collect();
        SaliencyMap {
            height: s.height,
            width: s.width,
            data,
        }
    }

    /// Bilinear resample (align-corners=false), same convention as the
    /// network's upsampling.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let t = Tensor4::<f64>::new(
            Shape4::new(1, 1, self.height, self.width),
            self.data.clone(),
        )
        .expect("consistent by construction");
        let r = crate::tensor::kernels::bilinear_resize(&t, height, width);
        SaliencyMap {
            height,
            width,
            data: r.into_data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// H x W ground-truth mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Metric(format!(
                "mask {height}x{width} expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mask as a {0, 1} float tensor of shape `[1, 1, H, W]`.
    pub fn to_tensor<E: Element>(&self) -> Tensor4<E> {
        let data = self
            .data
            .iter()
            .map(|&v| if v { E::one() } else { E::zero() })
            .collect();
        Tensor4::new(Shape4::new(1, 1, self.height, self.width), data)
            .expect("consistent by construction")
    }
}
