use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Pixel-space clip, `[frames, 3, H, W]`, nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<T>(Tensor<T>);

/// Latent clip, `[frames, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T>(Tensor<T>);

macro_rules! frame_major {
    ($ty:ident, $what:literal, $check:expr) => {
        impl<T: Real> $ty<T> {
            pub fn new(tensor: Tensor<T>) -> Result<Self> {
                let s = tensor.shape();
                if s.len() != 4 {
                    return Err(Error::shape($what, format!("expected [F, C, H, W], got {s:?}")));
                }
                if s[0] == 0 {
                    return Err(Error::Empty($what));
                }
                let check: fn(&[usize]) -> Result<()> = $check;
                check(s)?;
                Ok(Self(tensor))
            }

            pub fn tensor(&self) -> &Tensor<T> {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor<T> {
                self.0
            }

            pub fn shape(&self) -> [usize; 4] {
                let s = self.0.shape();
                [s[0], s[1], s[2], s[3]]
            }

            pub fn frames(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn channels(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn height(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn width(&self) -> usize {
                self.0.shape()[3]
            }

            /// One `[C, H, W]` frame as a flat slice.
            pub fn frame(&self, i: usize) -> &[T] {
                let n: usize = self.0.shape()[1..].iter().product();
                &self.0.data()[i * n..(i + 1) * n]
            }

            pub fn cast<U: Real>(&self) -> $ty<U> {
                $ty(self.0.cast())
            }
        }
    };
}

frame_major!(VideoTensor, "video", |s| {
    if s[1] != 3 {
        return Err(Error::shape("video", format!("expected 3 colour channels, got {}", s[1])));
    }
    Ok(())
});
frame_major!(LatentTensor, "latent", |_| Ok(()));

impl<T: Real> VideoTensor<T> {
    pub fn clamp_unit(&self) -> Self {
        Self(self.0.map(|v| v.max(-T::one()).min(T::one())))
    }
}

/// Stacks clips of identical shape into a `[B, C, F, H, W]` network batch.
pub fn to_batch<T: Real>(clips: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = clips.first().ok_or(Error::Empty("to_batch"))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * clips.len());
    for c in clips {
        if c.shape() != s.as_slice() {
            return Err(Error::shape("to_batch", format!("{:?} vs {s:?}", c.shape())));
        }
        data.extend(c.swap_leading_axes()?.into_data());
    }
    Tensor::new(vec![clips.len(), s[1], s[0], s[2], s[3]], data)
}

/// Inverse of [`to_batch`]: `[B, C, F, H, W]` to `B` clips of `[F, C, H, W]`.
pub fn from_batch<T: Real>(batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let s = batch.shape();
    if s.len() != 5 {
        return Err(Error::shape("from_batch", format!("expected rank 5, got {s:?}")));
    }
    let per = s[1..].iter().product::<usize>();
    batch
        .data()
        .chunks(per.max(1))
        .take(s[0])
        .map(|c| Tensor::new(s[1..].to_vec(), c.to_vec())?.swap_leading_axes())
        .collect()
}

/// Prepends `rt - 1` copies of the first frame: `N + 1` frames become `N + rt`.
pub fn causal_pad<T: Real>(video: &VideoTensor<T>, rt: usize) -> Result<VideoTensor<T>> {
    if rt == 0 {
        return Err(Error::Config("r_t must be positive".into()));
    }
    let [f, c, h, w] = video.shape();
    let mut data = Vec::with_capacity((f + rt - 1) * c * h * w);
    for _ in 1..rt {
        data.extend_from_slice(video.frame(0));
    }
    data.extend_from_slice(video.tensor().data());
    VideoTensor::new(Tensor::new(vec![f + rt - 1, c, h, w], data)?)
}

/// Drops the first `rt - 1` frames: `(n + 1)·rt` frames become `n·rt + 1`.
pub fn causal_trim<T: Real>(video: &VideoTensor<T>, rt: usize) -> Result<VideoTensor<T>> {
    let [f, c, h, w] = video.shape();
    if rt == 0 || f % rt != 0 {
        return Err(Error::FrameCount {
            frames: f,
            rt,
            mode: "causal trim needs a multiple of r_t",
        });
    }
    let n = c * h * w;
    let data = video.tensor().data()[(rt - 1) * n..].to_vec();
    VideoTensor::new(Tensor::new(vec![f - (rt - 1), c, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize) -> VideoTensor<f32> {
        VideoTensor::new(Tensor::from_fn(&[frames, 3, 2, 2], |i| i as f32)).unwrap()
    }

    #[test]
    fn pad_duplicates_first_frame() {
        let v = clip(17);
        let p = causal_pad(&v, 4).unwrap();
        assert_eq!(p.frames(), 20);
        for i in 0..4 {
            assert_eq!(p.frame(i), v.frame(0));
        }
        assert_eq!(p.frame(4), v.frame(1));
        assert_eq!(causal_pad(&v, 1).unwrap(), v);
    }

    #[test]
    fn trim_restores_count() {
        let v = clip(20);
        let t = causal_trim(&v, 4).unwrap();
        assert_eq!(t.frames(), 17);
        assert_eq!(t.frame(0), v.frame(3));
        assert!(causal_trim(&clip(17), 4).is_err());
        assert_eq!(causal_trim(&causal_pad(&clip(5), 4).unwrap(), 4).unwrap().frames(), 5);
    }

    #[test]
    fn batch_round_trip() {
        let a = clip(3).into_tensor();
        let b = a.map(|v| -v);
        let batch = to_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 3, 2, 2]);
        let back = from_batch(&batch).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[2, 1, 4, 4])).is_err());
        assert!(LatentTensor::new(Tensor::<f32>::zeros(&[2, 1, 4, 4])).is_ok());
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[0, 3, 4, 4])).is_err());
    }
}
