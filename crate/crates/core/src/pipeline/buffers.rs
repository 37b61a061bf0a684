//! Decoded frame and MV buffers shared by the encoder and decoder.

use std::collections::VecDeque;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::mmc::MAX_REFERENCES;
use crate::model::References;

pub const MV_HISTORY: usize = 3;

/// Ring buffers of decoded frames (capacity 4) and decoded MVs (capacity 3), newest first.
///
/// After an I-frame every frame slot holds it. MV slots read as zero fields
/// until the first P-frame is decoded, then missing slots repeat the furthest
/// real MV.
#[derive(Debug, Clone, Default)]
pub struct ReferenceBuffers {
    frames: VecDeque<Tensor>,
    mvs: VecDeque<Tensor>,
    decoded_p: usize,
}

impl ReferenceBuffers {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resets both buffers around an intra frame `(1, 3, H, W)`.
    pub fn reset(&mut self, intra: Tensor) {
        self.frames = std::iter::repeat_n(intra, MAX_REFERENCES).collect();
        self.mvs.clear();
        self.decoded_p = 0;
    }

    pub fn is_initialized(&self) -> bool {
        !self.frames.is_empty()
    }

    pub fn push(&mut self, frame: Tensor, mv: Tensor) {
        self.frames.push_front(frame);
        self.frames.truncate(MAX_REFERENCES);
        self.mvs.push_front(mv);
        self.mvs.truncate(MV_HISTORY);
        self.decoded_p += 1;
    }

    /// P-frames decoded since the last reset.
    pub fn decoded_p_frames(&self) -> usize {
        self.decoded_p
    }

    /// Real (non-filler) MV fields held.
    pub fn real_mvs(&self) -> usize {
        self.mvs.len()
    }

    /// Frame slots filled by distinct decoded pictures.
    pub fn distinct_frames(&self) -> usize {
        if self.frames.is_empty() {
            0
        } else {
            (self.decoded_p + 1).min(MAX_REFERENCES)
        }
    }

    pub fn references(&self) -> Result<References> {
        let newest = self
            .frames
            .front()
            .ok_or_else(|| Error::Config("reference buffers used before an intra frame".into()))?;
        let frames: [Tensor; MAX_REFERENCES] = std::array::from_fn(|i| self.frames[i].clone());
        let mvs: [Tensor; MV_HISTORY] = match self.mvs.back() {
            None => {
                let (n, _, h, w) = newest.dims4()?;
                let zero = Tensor::zeros((n, 2, h, w), newest.dtype(), newest.device())?;
                std::array::from_fn(|_| zero.clone())
            }
            Some(furthest) => std::array::from_fn(|i| self.mvs.get(i).unwrap_or(furthest).clone()),
        };
        Ok(References { frames, mvs })
    }

    /// Flattened contents, for replay-equality checks.
    pub fn snapshot(&self) -> Result<Vec<Vec<f32>>> {
        self.frames
            .iter()
            .chain(&self.mvs)
            .map(|t| Ok(t.flatten_all()?.to_vec1::<f32>()?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn filled(c: usize, v: f32) -> Tensor {
        Tensor::full(v, (1, c, 4, 4), &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f32 {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0]
    }

    #[test]
    fn cold_start_and_duplication() {
        let mut b = ReferenceBuffers::new();
        assert!(b.references().is_err());
        b.reset(filled(3, 0.5));
        let r = b.references().unwrap();
        assert!(r.frames.iter().all(|f| value(f) == 0.5));
        assert!(r.mvs.iter().all(|m| value(m) == 0.0));
        assert_eq!((b.distinct_frames(), b.real_mvs()), (1, 0));
        for n in 1..=5 {
            b.push(filled(3, n as f32), filled(2, 10.0 * n as f32));
            let r = b.references().unwrap();
            let frames: Vec<f32> = r.frames.iter().map(value).collect();
            let mvs: Vec<f32> = r.mvs.iter().map(value).collect();
            let expect_frames: Vec<f32> = (0..4)
                .map(|i| if i < n { (n - i) as f32 } else { 0.5 })
                .collect();
            let expect_mvs: Vec<f32> = (0..3).map(|i| 10.0 * (n - i.min(n - 1)) as f32).collect();
            assert_eq!(frames, expect_frames, "after {n} P-frames");
            assert_eq!(mvs, expect_mvs, "after {n} P-frames");
            assert_eq!(b.distinct_frames(), (n + 1).min(4));
            assert_eq!(b.real_mvs(), n.min(3));
        }
    }
}
