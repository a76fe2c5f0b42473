//! Procedural clips of moving shapes, rendered at a source frame rate and
//! subsampled to a lower sample rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::VideoTensor;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per clip after subsampling.
    pub clip_length: usize,
    pub source_fps: u32,
    pub sample_fps: u32,
    pub batch: usize,
    pub objects: (usize, usize),
    /// Speed range in pixels per source frame.
    pub speed: (f64, f64),
    /// Object size range as a fraction of the shorter side.
    pub size: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            clip_length: 17,
            source_fps: 24,
            sample_fps: 8,
            batch: 2,
            objects: (1, 3),
            speed: (0.1, 0.6),
            size: (0.2, 0.45),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn stride(&self) -> Result<usize> {
        if self.sample_fps == 0 || self.sample_fps > self.source_fps {
            return Err(Error::Config(format!(
                "sample_fps {} must be in 1..={}",
                self.sample_fps, self.source_fps
            )));
        }
        if self.source_fps % self.sample_fps != 0 {
            return Err(Error::Config(format!(
                "source_fps {} is not a multiple of sample_fps {}",
                self.source_fps, self.sample_fps
            )));
        }
        Ok((self.source_fps / self.sample_fps) as usize)
    }

    fn validate(&self) -> Result<usize> {
        if self.height == 0 || self.width == 0 || self.clip_length == 0 {
            return Err(Error::Empty("synth"));
        }
        if self.objects.0 > self.objects.1 || self.speed.0 > self.speed.1 || self.size.0 > self.size.1 {
            return Err(Error::Config("synth ranges must be ordered (min, max)".into()));
        }
        self.stride()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rect { half_w: f64, half_h: f64 },
    Circle { radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Centre at source frame 0, in pixels.
    pub start: [f64; 2],
    /// Pixels per source frame, `(x, y)`.
    pub velocity: [f64; 2],
}

impl SceneObject {
    /// Centre at `source_frame`, bouncing off the frame borders.
    pub fn center(&self, source_frame: f64, width: usize, height: usize) -> [f64; 2] {
        let bounce = |p: f64, extent: usize| {
            let e = extent as f64;
            let m = p.rem_euclid(2.0 * e);
            if m > e {
                2.0 * e - m
            } else {
                m
            }
        };
        [
            bounce(self.start[0] + self.velocity[0] * source_frame, width),
            bounce(self.start[1] + self.velocity[1] * source_frame, height),
        ]
    }

    /// Signed distance from pixel centre `(x, y)` to the shape edge.
    fn distance(&self, x: f64, y: f64, c: [f64; 2]) -> f64 {
        let (dx, dy) = (x - c[0], y - c[1]);
        match self.shape {
            Shape::Circle { radius } => (dx * dx + dy * dy).sqrt() - radius,
            Shape::Rect { half_w, half_h } => {
                let qx = dx.abs() - half_w;
                let qy = dy.abs() - half_h;
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: [f64; 3],
    pub objects: Vec<SceneObject>,
}

fn scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let side = cfg.height.min(cfg.width) as f64;
    let background = [0; 3].map(|_| rng.random_range(-1.0..-0.3));
    let count = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let objects = (0..count)
        .map(|_| {
            let s = side * rng.random_range(cfg.size.0..=cfg.size.1) / 2.0;
            let shape = if rng.random_bool(0.5) {
                Shape::Circle { radius: s }
            } else {
                Shape::Rect {
                    half_w: s,
                    half_h: s * rng.random_range(0.5..=1.0),
                }
            };
            let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            SceneObject {
                shape,
                color: [0; 3].map(|_| rng.random_range(-0.2..=1.0)),
                start: [
                    rng.random_range(0.0..cfg.width as f64),
                    rng.random_range(0.0..cfg.height as f64),
                ],
                velocity: [speed * angle.cos(), speed * angle.sin()],
            }
        })
        .collect();
    Scene { background, objects }
}

/// The scenes `synth_batch` renders for `cfg`, one per clip.
pub fn scenes(cfg: &SynthConfig) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.batch).map(|_| scene(cfg, &mut rng)).collect()
}

/// Object centres at every sampled frame: `[clip][frame][object]`.
pub fn trajectories(cfg: &SynthConfig) -> Result<Vec<Vec<Vec<[f64; 2]>>>> {
    let stride = cfg.validate()?;
    Ok(scenes(cfg)
        .iter()
        .map(|s| {
            (0..cfg.clip_length)
                .map(|t| {
                    s.objects
                        .iter()
                        .map(|o| o.center((t * stride) as f64, cfg.width, cfg.height))
                        .collect()
                })
                .collect()
        })
        .collect())
}

fn render(cfg: &SynthConfig, scene: &Scene, stride: usize) -> Result<VideoTensor<f32>> {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = Vec::with_capacity(cfg.clip_length * 3 * h * w);
    let mut frame = vec![[0.0f64; 3]; h * w];
    for t in 0..cfg.clip_length {
        frame.fill(scene.background);
        for o in &scene.objects {
            let c = o.center((t * stride) as f64, w, h);
            for y in 0..h {
                for x in 0..w {
                    // Pixel coverage from the signed distance: a one-pixel ramp.
                    let cover = (0.5 - o.distance(x as f64 + 0.5, y as f64 + 0.5, c)).clamp(0.0, 1.0);
                    if cover > 0.0 {
                        let px = &mut frame[y * w + x];
                        for ch in 0..3 {
                            px[ch] = (1.0 - cover) * px[ch] + cover * o.color[ch];
                        }
                    }
                }
            }
        }
        for ch in 0..3 {
            data.extend(frame.iter().map(|p| p[ch] as f32));
        }
    }
    VideoTensor::new(Tensor::new(vec![cfg.clip_length, 3, h, w], data)?)
}

/// `cfg.batch` clips of `clip_length` frames in `[-1, 1]`.
///
/// Frame `t` of a clip shows the scene at source frame `t · stride`, so a
/// lower sample rate means proportionally larger motion between frames.
pub fn synth_batch(cfg: &SynthConfig) -> Result<Vec<VideoTensor<f32>>> {
    let stride = cfg.validate()?;
    scenes(cfg).iter().map(|s| render(cfg, s, stride)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 16,
            width: 16,
            clip_length: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = synth_batch(&small()).unwrap();
        assert_eq!(a, synth_batch(&small()).unwrap());
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].shape(), [5, 3, 16, 16]);
        assert!(a[0].tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = synth_batch(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn stride_rules() {
        let mut c = small();
        c.source_fps = 24;
        c.sample_fps = 24;
        assert_eq!(c.stride().unwrap(), 1);
        c.sample_fps = 3;
        assert_eq!(c.stride().unwrap(), 8);
        c.sample_fps = 5;
        assert!(c.stride().is_err());
        c.sample_fps = 48;
        assert!(c.stride().is_err());
    }

    #[test]
    fn bounce_stays_inside() {
        let o = SceneObject {
            shape: Shape::Circle { radius: 1.0 },
            color: [0.0; 3],
            start: [15.0, 1.0],
            velocity: [1.0, -1.0],
        };
        for t in 0..100 {
            let [x, y] = o.center(t as f64, 16, 16);
            assert!((0.0..=16.0).contains(&x) && (0.0..=16.0).contains(&y));
        }
        assert_eq!(o.center(2.0, 16, 16), [15.0, 1.0]);
    }
}
