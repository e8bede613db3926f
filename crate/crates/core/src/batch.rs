//! Conversion between ndarray samples and backend tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{contract, Error, Result};
use crate::windowing::WindowPair;

/// Stacks `[c, h, w]` images into a `[B, c, h, w]` tensor.
pub fn stack_images(images: &[ArrayView3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| contract!("empty batch"))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dim() != (c, h, w) {
            return Err(contract!("batch mixes image shapes {:?} and {:?}", (c, h, w), img.dim()));
        }
        data.extend(img.iter().copied());
    }
    // ReLU maps NaN to zero, so a corrupt pixel would otherwise vanish silently.
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite pixel value {} in batch image {}", data[i], i / (c * h * w))));
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks label maps into a `[B, h, w]` u32 tensor.
pub fn stack_labels(labels: &[ArrayView2<u32>], device: &Device) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| contract!("empty batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if l.dim() != (h, w) {
            return Err(contract!("batch mixes label shapes {:?} and {:?}", (h, w), l.dim()));
        }
        data.extend(l.iter().copied());
    }
    Ok(Tensor::from_vec(data, (labels.len(), h, w), device)?)
}

/// Splits a `[B, u, h, w]` tensor into per-sample f32 arrays.
pub fn unstack_logits(logits: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (b, u, h, w) = logits.dims4()?;
    let flat = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = u * h * w;
    Ok((0..b)
        .map(|i| Array3::from_shape_vec((u, h, w), flat[i * per..(i + 1) * per].to_vec()).expect("sizes agree"))
        .collect())
}

/// A batch of window pairs on the backend.
#[derive(Debug, Clone)]
pub struct Batch {
    pub local: Tensor,
    pub context: Tensor,
    pub local_labels: Tensor,
    pub context_labels: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[&WindowPair], dtype: DType, device: &Device) -> Result<Self> {
        let local: Vec<_> = pairs.iter().map(|p| p.local_image.view()).collect();
        let context: Vec<_> = pairs.iter().map(|p| p.context_image.view()).collect();
        let ll: Vec<_> = pairs.iter().map(|p| p.local_label.view()).collect();
        let cl: Vec<_> = pairs.iter().map(|p| p.context_label.view()).collect();
        Ok(Self {
            local: stack_images(&local, dtype, device)?,
            context: stack_images(&context, dtype, device)?,
            local_labels: stack_labels(&ll, device)?,
            context_labels: stack_labels(&cl, device)?,
        })
    }

    pub fn len(&self) -> usize {
        self.local.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
