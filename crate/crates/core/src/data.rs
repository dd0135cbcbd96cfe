//! In-memory labelled image sets and the seeded synthetic generator.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, Ch]` with values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Input(format!("images must be [N,H,W,Ch], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, Ch)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn num_classes_seen(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (h, w, c) = self.image_dims();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), h, w, c], data)?, labels))
    }
}

/// Parameters of the synthetic task, written as
/// `synth:K=4,n=512,hw=8,ch=1,seed=0,noise=0.1,skew=0`.
///
/// Sample `j` of class `c` is the plane wave
/// `0.5 + 0.4 cos(2 pi f (x cos a + y sin a) / hw)` with angle `a = pi c / K`
/// and `f = 1 + (c mod 2)`, identical in every channel, plus independent
/// `N(0, noise^2)` pixel noise, clipped to `[0, 1]`. Labels cycle through the
/// classes, except that the first `round(skew * n)` samples are all class 0;
/// the sample order is then shuffled with the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub noise: f64,
    pub skew: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 512,
            size: 8,
            channels: 1,
            seed: 0,
            noise: 0.1,
            skew: 0.0,
        }
    }
}

impl SynthSpec {
    /// Parses the part after `synth:`; missing keys keep their defaults.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut s = Self::default();
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("synthetic data option `{pair}` is not key=value")))?;
            let bad = || Error::Input(format!("invalid value `{v}` for synthetic data option `{k}`"));
            match k {
                "K" => s.classes = v.parse().map_err(|_| bad())?,
                "n" => s.samples = v.parse().map_err(|_| bad())?,
                "hw" => s.size = v.parse().map_err(|_| bad())?,
                "ch" => s.channels = v.parse().map_err(|_| bad())?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                "noise" => s.noise = v.parse().map_err(|_| bad())?,
                "skew" => s.skew = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Input(format!("unknown synthetic data option `{k}`"))),
            }
        }
        if s.classes == 0 || s.samples == 0 || s.size == 0 || s.channels == 0 {
            return Err(Error::Input("synthetic K, n, hw and ch must be positive".into()));
        }
        if !(s.noise >= 0.0 && s.noise.is_finite()) || !(0.0..=1.0).contains(&s.skew) {
            return Err(Error::Input("synthetic noise must be >= 0 and skew in [0, 1]".into()));
        }
        Ok(s)
    }

    pub fn generate(&self) -> Result<Dataset> {
        let mut rng = Rng::new(self.seed);
        let (k, n, hw, ch) = (self.classes, self.samples, self.size, self.channels);
        let skewed = ((self.skew * n as f64).round() as usize).min(n);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < skewed { 0 } else { i % k }).collect();
        let order = rng.permutation(n);
        labels = order.iter().map(|&i| labels[i]).collect();

        let mut data = Vec::with_capacity(n * hw * hw * ch);
        for &c in &labels {
            let angle = PI * c as f64 / k as f64;
            let freq = 1.0 + (c % 2) as f64;
            for y in 0..hw {
                for x in 0..hw {
                    let phase = 2.0 * PI * freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) / hw as f64;
                    let clean = 0.5 + 0.4 * phase.cos();
                    for _ in 0..ch {
                        data.push((clean + self.noise * rng.normal()).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Dataset::new(Tensor::new(&[n, hw, hw, ch], data)?, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_overrides() {
        let s = SynthSpec::parse("K=3,n=10,hw=4,seed=7").unwrap();
        assert_eq!((s.classes, s.samples, s.size, s.channels, s.seed), (3, 10, 4, 1, 7));
        assert!(SynthSpec::parse("K=3,foo=1").is_err());
        assert!(SynthSpec::parse("K=x").is_err());
        assert!(SynthSpec::parse("n=0").is_err());
        assert!(SynthSpec::parse("skew=2").is_err());
    }

    #[test]
    fn generator_is_seeded_and_bounded() {
        let spec = SynthSpec::parse("K=4,n=64,hw=8,seed=3").unwrap();
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_eq!(a.images.shape(), [64, 8, 8, 1]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let counts: Vec<usize> = (0..4).map(|c| a.labels.iter().filter(|&&l| l == c).count()).collect();
        assert_eq!(counts, [16, 16, 16, 16]);
        let b = SynthSpec { seed: 4, ..spec }.generate().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn noiseless_samples_follow_the_class_pattern() {
        let spec = SynthSpec { noise: 0.0, samples: 8, ..Default::default() };
        let d = spec.generate().unwrap();
        for (i, &c) in d.labels.iter().enumerate() {
            let (img, _) = d.batch(&[i]).unwrap();
            // pixel (0, 0) has phase 0 for every class
            assert!((img.data()[0] - 0.9).abs() < 1e-12, "class {c}");
        }
    }

    #[test]
    fn skew_concentrates_on_class_zero() {
        let d = SynthSpec { skew: 0.5, samples: 100, ..Default::default() }.generate().unwrap();
        let zeros = d.labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(zeros, 50 + 12);
    }

    #[test]
    fn batch_gathers_rows() {
        let d = SynthSpec { samples: 5, ..Default::default() }.generate().unwrap();
        let (x, y) = d.batch(&[4, 0]).unwrap();
        assert_eq!(x.shape(), [2, 8, 8, 1]);
        assert_eq!(y, vec![d.labels[4], d.labels[0]]);
        assert_eq!(x.data()[..64], d.images.data()[4 * 64..5 * 64]);
        assert!(d.batch(&[5]).is_err());
    }
}
