//! Synthetic segmentation data with known difficulty.
//!
//! Labels follow a Markov chain that always leaves the current class,
//! choosing uniformly among the others, with geometric segment lengths.
//! Class `c` emits `baseline + a * e_c + noise` where `e_c` is the `c`-th unit
//! vector and `a = separation * noise_std / sqrt(2)`, so any two class means
//! sit exactly `separation * noise_std` apart. The shared baseline of
//! `3 * noise_std` keeps most frames' largest channel positive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};

use crate::data::{Dataset, FeatureSequence, LabelSequence, LabeledSequence};
use crate::error::{Result, TcnError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_sequences: usize,
    pub mean_sequence_length: usize,
    pub mean_segment_length: f64,
    /// Distance between class means in units of `noise_std`.
    pub separation: f64,
    pub noise_std: f64,
    /// Sequences are assigned `source_id = group_<i mod num_groups>`.
    pub num_groups: usize,
    pub frame_period: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            feature_dim: 8,
            num_sequences: 10,
            mean_sequence_length: 200,
            mean_segment_length: 20.0,
            separation: 4.0,
            noise_std: 1.0,
            num_groups: 1,
            frame_period: 1.0 / 30.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TcnError::Config(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least 2 classes".into());
        }
        if self.feature_dim < self.num_classes {
            return bad(format!(
                "feature_dim ({}) must be >= num_classes ({}) to place equidistant means",
                self.feature_dim, self.num_classes
            ));
        }
        if self.num_sequences < 1 || self.mean_sequence_length < 1 || self.num_groups < 1 {
            return bad("sequence count, length and group count must be positive".into());
        }
        if !(self.mean_segment_length >= 1.0 && self.mean_segment_length.is_finite()) {
            return bad("mean_segment_length must be >= 1".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad("separation must be >= 0".into());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be positive".into());
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return bad("frame_period must be positive".into());
        }
        Ok(())
    }

    /// Class mean vectors, `means[c]` for 0-based class `c`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let a = self.separation * self.noise_std / std::f64::consts::SQRT_2;
        let base = 3.0 * self.noise_std;
        (0..self.num_classes)
            .map(|c| {
                (0..self.feature_dim)
                    .map(|f| if f == c { base + a } else { base })
                    .collect()
            })
            .collect()
    }
}

/// Markov label chain with segment lengths `1 + Geometric(1/mean)`.
pub struct LabelChain {
    classes: usize,
    lengths: Geometric,
}

impl LabelChain {
    pub fn new(classes: usize, mean_segment_length: f64) -> Result<Self> {
        let lengths = Geometric::new(1.0 / mean_segment_length)
            .map_err(|e| TcnError::Config(format!("segment length: {e}")))?;
        Ok(Self { classes, lengths })
    }

    /// Next 0-based class and segment length.
    pub fn next_segment(&self, rng: &mut impl Rng, previous: Option<usize>) -> (usize, usize) {
        let class = match previous {
            None => rng.random_range(0..self.classes),
            Some(p) => {
                let k = rng.random_range(0..self.classes - 1);
                if k >= p {
                    k + 1
                } else {
                    k
                }
            }
        };
        let len = 1 + self.lengths.sample(rng) as usize;
        (class, len)
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let chain = LabelChain::new(cfg.num_classes, cfg.mean_segment_length)?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| TcnError::Config(e.to_string()))?;
    let means = cfg.class_means();
    let spread = cfg.mean_sequence_length / 10;
    let mut dataset = Vec::with_capacity(cfg.num_sequences);

    for s in 0..cfg.num_sequences {
        let lo = cfg.mean_sequence_length - spread;
        let t_len = rng.random_range(lo..=cfg.mean_sequence_length + spread).max(1);
        let mut labels = Vec::with_capacity(t_len);
        let mut prev = None;
        while labels.len() < t_len {
            let (class, len) = chain.next_segment(&mut rng, prev);
            let take = len.min(t_len - labels.len());
            labels.extend(std::iter::repeat_n(class + 1, take));
            prev = Some(class);
        }
        let mut values = Matrix::zeros(cfg.feature_dim, t_len);
        for (t, &y) in labels.iter().enumerate() {
            for f in 0..cfg.feature_dim {
                values.set(f, t, means[y - 1][f] + noise.sample(&mut rng));
            }
        }
        let features = FeatureSequence::new(
            values,
            cfg.frame_period,
            format!("group_{}", s % cfg.num_groups),
        )?;
        dataset.push(LabeledSequence::new(features, LabelSequence::new(labels))?);
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::collapse;

    #[test]
    fn same_seed_same_data() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        let b = synth_generate(&SynthConfig { rng_seed: 1, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn means_are_equidistant() {
        let cfg = SynthConfig {
            separation: 3.0,
            noise_std: 0.5,
            ..SynthConfig::default()
        };
        let m = cfg.class_means();
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_self_transitions_and_lengths() {
        let cfg = SynthConfig {
            num_sequences: 20,
            ..SynthConfig::default()
        };
        for seq in synth_generate(&cfg).unwrap() {
            let t = seq.len();
            assert!((180..=220).contains(&t));
            assert!(seq.labels.labels.iter().all(|&l| (1..=5).contains(&l)));
        }
    }

    #[test]
    fn segment_length_mean_converges() {
        // drop the last (truncated) segment of every sequence
        let cfg = SynthConfig {
            num_sequences: 20,
            mean_sequence_length: 12_000,
            mean_segment_length: 15.0,
            feature_dim: 5,
            ..SynthConfig::default()
        };
        let mut lens = Vec::new();
        for seq in synth_generate(&cfg).unwrap() {
            let segs = collapse(&seq.labels.labels);
            lens.extend(segs[..segs.len() - 1].iter().map(|s| s.len()));
        }
        assert!(lens.len() >= 10_000, "{}", lens.len());
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        assert!((mean - 15.0).abs() / 15.0 < 0.05, "mean {mean}");
    }

    #[test]
    fn nearest_mean_is_accurate_when_separated() {
        let cfg = SynthConfig {
            separation: 10.0,
            num_sequences: 5,
            ..SynthConfig::default()
        };
        let means = cfg.class_means();
        let (mut ok, mut total) = (0, 0);
        for seq in synth_generate(&cfg).unwrap() {
            for t in 0..seq.len() {
                let x = seq.features.values.column(t);
                let best = (0..means.len())
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                        let db: f64 = x.iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                ok += usize::from(best + 1 == seq.labels.labels[t]);
                total += 1;
            }
        }
        assert!(ok as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn zero_separation_is_chance() {
        // class-agnostic emission: nearest-mean picks the largest channel among
        // the first C, which is independent of the label
        let cfg = SynthConfig {
            separation: 0.0,
            num_sequences: 40,
            ..SynthConfig::default()
        };
        let (mut ok, mut total) = (0, 0);
        for seq in synth_generate(&cfg).unwrap() {
            for t in 0..seq.len() {
                let col = seq.features.values.column(t);
                let guess = (0..cfg.num_classes).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
                ok += usize::from(guess + 1 == seq.labels.labels[t]);
                total += 1;
            }
        }
        let acc = 100.0 * ok as f64 / total as f64;
        assert!((acc - 20.0).abs() < 3.0, "{acc}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_generate(&SynthConfig {
            feature_dim: 3,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(synth_generate(&SynthConfig {
            mean_segment_length: 0.5,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
