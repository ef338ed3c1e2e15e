use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Finite Gaussian mixture on the real line. Zero-std components are point masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mixture(pub Vec<Component>);

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

impl Mixture {
    pub fn single(mean: f64, std: f64) -> Self {
        Mixture(vec![Component { weight: 1.0, mean, std }])
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidSpec(format!("{what}: empty mixture")));
        }
        let mut total = 0.0;
        for c in &self.0 {
            if !(c.weight >= 0.0 && c.std >= 0.0 && c.mean.is_finite() && c.std.is_finite()) {
                return Err(Error::InvalidSpec(format!("{what}: invalid component {c:?}")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("{what}: weights sum to {total}")));
        }
        Ok(())
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.0.iter().map(|c| c.weight * normal_pdf(x, c.mean, c.std)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        self.0
            .iter()
            .map(|c| c.weight * (c.std * c.std + (c.mean - m).powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_unimodal(&self) -> bool {
        self.0.iter().filter(|c| c.weight > 0.0).count() == 1
    }

    fn pick(&self, rng: &mut impl Rng) -> &Component {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.0 {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.0.last().unwrap()
    }

    /// Draws `(value, standardized offset within the chosen component)`.
    pub fn sample_with_z(&self, rng: &mut impl Rng) -> (f64, f64) {
        let c = *self.pick(rng);
        let z: f64 = StandardNormal.sample(rng);
        (c.mean + c.std * z, z)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.sample_with_z(rng).0
    }
}

/// Raw (pre-normalization) conditional laws of one token class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassLaw {
    pub pitch: Mixture,
    pub energy_mean: f64,
    pub energy_std: f64,
    /// Correlation between energy and the within-component pitch offset.
    pub rho: f64,
    /// Mixture over natural-log frame counts.
    pub log_duration: Mixture,
}

/// One token's raw draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawToken {
    pub pitch: f64,
    pub energy: f64,
    pub duration: u32,
}

/// `max(1, round_half_up(exp(d)))`
pub fn duration_from_log(d: f64) -> u32 {
    let frames = (d.exp() + 0.5).floor();
    if frames.is_nan() || frames < 1.0 {
        1
    } else if frames > u32::MAX as f64 {
        u32::MAX
    } else {
        frames as u32
    }
}

impl ClassLaw {
    pub fn validate(&self, class: usize) -> Result<()> {
        self.pitch.validate(&format!("class {class} pitch"))?;
        self.log_duration.validate(&format!("class {class} duration"))?;
        if !(self.energy_std >= 0.0) || !self.energy_mean.is_finite() || !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidSpec(format!("class {class}: invalid energy law")));
        }
        Ok(())
    }

    pub fn is_unimodal(&self) -> bool {
        self.pitch.is_unimodal() && self.log_duration.is_unimodal()
    }

    pub fn energy(&self) -> Mixture {
        Mixture::single(self.energy_mean, self.energy_std)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> RawToken {
        let (pitch, zp) = self.pitch.sample_with_z(rng);
        let e: f64 = StandardNormal.sample(rng);
        let energy = self.energy_mean + self.energy_std * (self.rho * zp + (1.0 - self.rho * self.rho).sqrt() * e);
        let duration = duration_from_log(self.log_duration.sample(rng));
        RawToken { pitch, energy, duration }
    }

    /// Seed-derived law: even classes are unimodal, odd classes have
    /// two well-separated pitch and log-duration modes.
    pub fn derive(class: usize, rng: &mut impl Rng) -> Self {
        let center = rng.random_range(-2.0..2.0);
        let pitch = if class % 2 == 0 {
            Mixture::single(center, rng.random_range(0.3..0.6))
        } else {
            let delta = rng.random_range(1.0..1.5);
            let w = rng.random_range(0.3..0.7);
            let std = rng.random_range(0.2..0.35);
            Mixture(vec![
                Component { weight: w, mean: center - delta, std },
                Component { weight: 1.0 - w, mean: center + delta, std },
            ])
        };
        let energy_mean = rng.random_range(-2.0..2.0);
        let energy_std = rng.random_range(0.3..0.6);
        let rho = rng.random_range(-0.8..0.8);
        let m = rng.random_range(1.6..2.4);
        let log_duration = if class % 2 == 0 {
            Mixture::single(m, rng.random_range(0.15..0.25))
        } else {
            let delta = rng.random_range(0.3..0.45);
            let w = rng.random_range(0.3..0.7);
            let std = rng.random_range(0.08..0.12);
            Mixture(vec![
                Component { weight: w, mean: m - delta, std },
                Component { weight: 1.0 - w, mean: m + delta, std },
            ])
        };
        ClassLaw {
            pitch,
            energy_mean,
            energy_std,
            rho,
            log_duration,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duration_rounding() {
        assert_eq!(duration_from_log(f64::NEG_INFINITY), 1);
        assert_eq!(duration_from_log(-3.0), 1);
        assert_eq!(duration_from_log(2.5f64.ln()), 3);
        assert_eq!(duration_from_log(2.0f64.ln()), 2);
        let mut last = 0;
        for i in 0..400 {
            let d = duration_from_log(-2.0 + i as f64 * 0.01);
            assert!(d >= last);
            last = d;
        }
    }

    #[test]
    fn pdf_at_mean_matches_hand_value() {
        let m = Mixture(vec![
            Component { weight: 0.3, mean: -1.0, std: 0.5 },
            Component { weight: 0.7, mean: 2.0, std: 1.0 },
        ]);
        // 0.3 / (0.5 sqrt(2 pi)) + 0.7 * phi(3)
        let hand = 0.3 * 0.797_884_560_802_865_4 + 0.7 * 0.004_431_848_411_938_008;
        assert!((m.pdf(-1.0) - hand).abs() < 1e-12);
    }

    #[test]
    fn symmetric_mixture_is_symmetric() {
        let m = Mixture(vec![
            Component { weight: 0.5, mean: -1.0, std: 0.4 },
            Component { weight: 0.5, mean: 3.0, std: 0.4 },
        ]);
        for x in [0.1, 0.7, 2.3, 5.0] {
            assert!((m.pdf(1.0 + x) - m.pdf(1.0 - x)).abs() < 1e-15);
        }
    }

    #[test]
    fn derived_laws_are_valid() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for c in 0..16 {
            let law = ClassLaw::derive(c, &mut rng);
            law.validate(c).unwrap();
            assert_eq!(law.is_unimodal(), c % 2 == 0);
        }
    }

    #[test]
    fn energy_keeps_marginal_and_correlation() {
        let law = ClassLaw {
            pitch: Mixture::single(0.0, 1.0),
            energy_mean: 1.0,
            energy_std: 2.0,
            rho: 0.6,
            log_duration: Mixture::single(1.0, 0.1),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let draws: Vec<RawToken> = (0..n).map(|_| law.sample(&mut rng)).collect();
        let me = draws.iter().map(|d| d.energy).sum::<f64>() / n as f64;
        let ve = draws.iter().map(|d| (d.energy - me).powi(2)).sum::<f64>() / n as f64;
        let cov = draws.iter().map(|d| d.pitch * (d.energy - me)).sum::<f64>() / n as f64;
        assert!((me - 1.0).abs() < 0.03);
        assert!((ve - 4.0).abs() < 0.1);
        assert!((cov / 2.0 - 0.6).abs() < 0.02);
    }
}
