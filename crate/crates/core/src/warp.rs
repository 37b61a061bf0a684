//! Bilinear warping, flow-chain composition and flow pyramids.
//!
//! Flows are backward: `warp(reference, v)(p) = reference(p + v(p))`, with
//! channel 0 horizontal and channel 1 vertical, in pixels of the field's own grid.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::kernels;

/// Dense 2-vector field of shape `(N, 2, H, W)` at a pyramid level.
#[derive(Debug, Clone)]
pub struct MotionField {
    pub vectors: Tensor,
    pub level: usize,
}

impl MotionField {
    pub fn new(vectors: Tensor, level: usize) -> Result<Self> {
        let (_, c, _, _) = vectors.dims4()?;
        if c != 2 {
            return Err(Error::Shape(format!("motion field with {c} channels")));
        }
        Ok(Self { vectors, level })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros((1, 2, height, width), DType::F32, &Device::Cpu)?, 0)
    }

    pub fn constant(height: usize, width: usize, v: (f32, f32)) -> Result<Self> {
        let mut data = vec![v.0; height * width];
        data.extend(std::iter::repeat_n(v.1, height * width));
        Self::from_planar(&data, height, width)
    }

    pub fn from_planar(data: &[f32], height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::from_slice(data, (1, 2, height, width), &Device::Cpu)?, 0)
    }

    pub fn to_planar(&self) -> Result<Vec<f32>> {
        Ok(self.vectors.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.vectors.dims4()?;
        Ok((h, w))
    }

    pub fn detach(&self) -> Self {
        Self {
            vectors: self.vectors.detach(),
            level: self.level,
        }
    }
}

fn check_same_grid(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (na, _, ha, wa) = a.dims4()?;
    let (nb, _, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Samples `data` (`N, C, H, W`) at `p + flow(p)` with edge-clamped bilinear interpolation.
pub fn bilinear_warp(data: &Tensor, flow: &Tensor) -> Result<Tensor> {
    check_same_grid(data, flow, "warp")?;
    if flow.dim(1)? != 2 {
        return Err(Error::Shape(format!("flow with {} channels", flow.dim(1)?)));
    }
    let flow = if flow.dtype() == data.dtype() {
        flow.clone()
    } else {
        flow.to_dtype(data.dtype())?
    };
    Ok(kernels::warp(data, &flow)?)
}

/// `base + Σ prior_warped`.
pub fn compose_chain(base: &Tensor, prior_warped: &[Tensor]) -> Result<Tensor> {
    let mut acc = base.clone();
    for p in prior_warped {
        if p.dims() != base.dims() {
            return Err(Error::Shape(format!(
                "chain term {:?} vs base {:?}",
                p.dims(),
                base.dims()
            )));
        }
        acc = (acc + p)?;
    }
    Ok(acc)
}

/// Warps buffered fields towards the current one along an accumulating chain.
#[derive(Debug, Clone)]
pub struct WarpChain {
    /// `warped[k]` is buffered field `k` (newest first) warped by `flows[k]`.
    pub warped: Vec<Tensor>,
    /// `flows[0] = base`, `flows[k + 1] = flows[k] + warped[k]`; one more than `warped`.
    pub flows: Vec<Tensor>,
}

/// Builds the chain `w_k = warp(m_k, base + Σ_{l<k} w_l)` over `buffered`
/// (newest first).
pub fn warp_chain(base: &Tensor, buffered: &[Tensor]) -> Result<WarpChain> {
    let mut warped = Vec::with_capacity(buffered.len());
    let mut flows = vec![base.clone()];
    for m in buffered {
        let flow = flows.last().expect("chain starts with the base").clone();
        let w = bilinear_warp(m, &flow)?;
        flows.push(compose_chain(&flow, std::slice::from_ref(&w))?);
        warped.push(w);
    }
    Ok(WarpChain { warped, flows })
}

/// Halves resolution `to_level - level` times by 2x2 averaging, halving magnitudes each time.
pub fn downsample_flow(flow: &MotionField, to_level: usize) -> Result<MotionField> {
    if to_level < flow.level {
        return Err(Error::Shape(format!(
            "cannot downsample level {} to finer level {to_level}",
            flow.level
        )));
    }
    let mut v = flow.vectors.clone();
    for _ in flow.level..to_level {
        v = downsample_flow_tensor(&v)?;
    }
    MotionField::new(v, to_level)
}

pub fn downsample_flow_tensor(v: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = v.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            reason: "cannot halve a flow field below 2 pixels",
        });
    }
    Ok((kernels::resize_bilinear(v, h / 2, w / 2)? * 0.5)?)
}

/// Doubles resolution bilinearly and doubles magnitudes.
pub fn upsample_flow_2x(flow: &MotionField) -> Result<MotionField> {
    if flow.level == 0 {
        return Err(Error::Shape("level-0 flow has no finer level".into()));
    }
    MotionField::new(upsample_flow_tensor(&flow.vectors)?, flow.level - 1)
}

pub fn upsample_flow_tensor(v: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = v.dims4()?;
    Ok((kernels::resize_bilinear(v, 2 * h, 2 * w)? * 2.0)?)
}

/// Bilinear resize of a feature map (no magnitude scaling).
pub fn resize(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    Ok(kernels::resize_bilinear(x, height, width)?)
}
