//! Synthetic quark-like and gluon-like jets.
//!
//! Gluon jets get more particles and a wider angular spread than quark jets.
//! The gap between the two is set by a [`Separability`] preset. Every event is
//! a pure function of `(seed, label, event index)`.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use thiserror::Error;

use crate::detector::{bin_hits, crop_jet_window, find_window_center, Channel, DetectorError, DetectorHit, GridSpec, JetWindow};
use crate::rng::{self, Domain};
use crate::Label;

/// Jet selection thresholds.
pub const MIN_JET_PT: f64 = 70.0;
pub const MAX_JET_ABS_ETA: f64 = 1.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Separability {
    Easy,
    PaperLike,
    Hard,
}

impl Separability {
    pub fn name(self) -> &'static str {
        match self {
            Separability::Easy => "easy",
            Separability::PaperLike => "paperlike",
            Separability::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Separability::Easy),
            "paperlike" => Some(Separability::PaperLike),
            "hard" => Some(Separability::Hard),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub mean_mult_quark: f64,
    pub mean_mult_gluon: f64,
    /// Angular standard deviation in η and φ.
    pub width_quark: f64,
    pub width_gluon: f64,
    pub jet_pt_range: (f64, f64),
    pub charged_frac: f64,
    pub photon_frac: f64,
    pub neutral_had_frac: f64,
    /// Fraction of a charged particle's energy left in the ECAL.
    pub charged_ecal_frac: f64,
    /// Jet axes are drawn uniformly in |η| < this bound.
    pub axis_eta_max: f64,
    pub separability: Separability,
    pub seed: u64,
    pub grid: GridSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mean_mult_quark: 12.0,
            mean_mult_gluon: 27.0,
            width_quark: 0.08,
            width_gluon: 0.16,
            jet_pt_range: (90.0, 170.0),
            charged_frac: 0.60,
            photon_frac: 0.25,
            neutral_had_frac: 0.15,
            charged_ecal_frac: 0.3,
            axis_eta_max: 1.2,
            separability: Separability::Easy,
            seed: 0,
            grid: GridSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn preset(separability: Separability, seed: u64) -> Self {
        let base = SynthConfig {
            separability,
            seed,
            ..SynthConfig::default()
        };
        match separability {
            Separability::Easy => base,
            Separability::PaperLike => SynthConfig {
                width_quark: 0.10,
                width_gluon: 0.14,
                mean_mult_quark: 16.0,
                mean_mult_gluon: 22.0,
                ..base
            },
            Separability::Hard => SynthConfig {
                width_quark: 0.11,
                width_gluon: 0.125,
                mean_mult_quark: 18.0,
                mean_mult_gluon: 21.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fracs = [self.charged_frac, self.photon_frac, self.neutral_had_frac];
        if fracs.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidConfig("species fractions must be probabilities summing to 1"));
        }
        if !(self.width_quark > 0.0 && self.width_gluon > 0.0) {
            return Err(SynthError::InvalidConfig("angular widths must be positive"));
        }
        if !(self.mean_mult_quark >= 1.0 && self.mean_mult_gluon >= 1.0) {
            return Err(SynthError::InvalidConfig("mean multiplicities must be at least 1"));
        }
        let (lo, hi) = self.jet_pt_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SynthError::InvalidConfig("jet pT range must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.charged_ecal_frac) {
            return Err(SynthError::InvalidConfig("charged ECAL fraction must lie in [0, 1]"));
        }
        if !(self.axis_eta_max > 0.0) {
            return Err(SynthError::InvalidConfig("axis eta bound must be positive"));
        }
        self.grid.validate()?;
        Ok(())
    }

    fn class_params(&self, label: Label) -> (f64, f64) {
        match label {
            Label::Quark => (self.mean_mult_quark, self.width_quark),
            Label::Gluon => (self.mean_mult_gluon, self.width_gluon),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetEvent {
    pub hits: Vec<DetectorHit>,
    pub true_eta: f64,
    pub true_phi: f64,
    pub label: Label,
    pub jet_pt: f64,
    pub n_particles: usize,
}

fn wrap_phi(phi: f64) -> f64 {
    let mut p = phi;
    while p <= -PI {
        p += 2.0 * PI;
    }
    while p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// Draws event `index` of class `label`.
///
/// Multiplicity is `1 + Poisson(mean - 1)`, so the class mean is exact and a
/// mean of 1 gives exactly one particle. Angular offsets are isotropic
/// Gaussians redrawn until they fall inside ΔR < 1. Momentum fractions follow
/// a flat Dirichlet. Charged particles leave a track (pT) plus part of their
/// energy in the ECAL; photons go to the ECAL and neutral hadrons to the HCAL.
pub fn sample_jet(config: &SynthConfig, label: Label, index: u64) -> JetEvent {
    let mut rng = rng::stream(config.seed, Domain::Event, label.index() as u64, index);
    let (mean, width) = config.class_params(label);

    let (lo, hi) = config.jet_pt_range;
    let jet_pt = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let true_eta = rng.random_range(-config.axis_eta_max..config.axis_eta_max);
    let true_phi = wrap_phi(rng.random_range(-PI..PI));

    let extra = if mean > 1.0 {
        Poisson::new(mean - 1.0).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let n = 1 + extra;

    let weights: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = weights.iter().sum();

    let mut hits = Vec::with_capacity(2 * n);
    for w in weights {
        let pt = jet_pt * w / total;
        let (deta, dphi) = loop {
            let de: f64 = StandardNormal.sample(&mut rng);
            let dp: f64 = StandardNormal.sample(&mut rng);
            let (de, dp) = (de * width, dp * width);
            if de * de + dp * dp < 1.0 {
                break (de, dp);
            }
        };
        let eta = true_eta + deta;
        let phi = wrap_phi(true_phi + dphi);
        let energy = pt * eta.cosh();
        let u: f64 = rng.random();
        let deposit = |value, channel| DetectorHit {
            eta,
            phi,
            value,
            channel,
        };
        if u < config.charged_frac {
            hits.push(deposit(pt, Channel::Track));
            hits.push(deposit(config.charged_ecal_frac * energy, Channel::Ecal));
        } else if u < config.charged_frac + config.photon_frac {
            hits.push(deposit(energy, Channel::Ecal));
        } else {
            hits.push(deposit(energy, Channel::Hcal));
        }
    }
    JetEvent {
        hits,
        true_eta,
        true_phi,
        label,
        jet_pt,
        n_particles: n,
    }
}

/// Jet selection: pT > 70 GeV and |η| < 1.8, both strict.
pub fn apply_selection(event: &JetEvent) -> bool {
    event.jet_pt > MIN_JET_PT && event.true_eta.abs() < MAX_JET_ABS_ETA
}

/// Runs one event through selection, binning, centring and cropping.
/// `Ok(None)` means the event failed selection.
pub fn window_for_event(config: &SynthConfig, label: Label, index: u64) -> Result<Option<JetWindow>, SynthError> {
    let event = sample_jet(config, label, index);
    if !apply_selection(&event) {
        return Ok(None);
    }
    let full = bin_hits(&event.hits, &config.grid)?;
    let center = find_window_center(&full, event.true_eta, event.true_phi)?;
    let mut window = crop_jet_window(&full, center)?;
    window.label = Some(label);
    Ok(Some(window))
}

/// Exactly `n_per_class` windows of each class, rejected events replaced by
/// the next index, shuffled by the config seed.
pub fn generate_dataset(config: &SynthConfig, n_per_class: usize) -> Result<Vec<JetWindow>, SynthError> {
    config.validate()?;
    if n_per_class == 0 {
        return Err(SynthError::InvalidConfig("n_per_class must be at least 1"));
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for label in Label::ALL {
        let mut index = 0u64;
        let mut accepted = 0;
        while accepted < n_per_class {
            if let Some(w) = window_for_event(config, label, index)? {
                out.push(w);
                accepted += 1;
            }
            index += 1;
        }
    }
    rng::shuffle(&mut out, &mut rng::stream(config.seed, Domain::Shuffle, 0, 0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_particle_limit_sits_on_axis() {
        let cfg = SynthConfig {
            mean_mult_quark: 1.0,
            width_quark: 1e-12,
            ..SynthConfig::default()
        };
        for i in 0..20 {
            let ev = sample_jet(&cfg, Label::Quark, i);
            assert_eq!(ev.n_particles, 1);
            for h in &ev.hits {
                assert!((h.eta - ev.true_eta).abs() < 1e-9);
                assert!((h.phi - ev.true_phi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = SynthConfig::preset(Separability::Hard, 77);
        assert_eq!(sample_jet(&cfg, Label::Gluon, 5), sample_jet(&cfg, Label::Gluon, 5));
        assert_ne!(sample_jet(&cfg, Label::Gluon, 5), sample_jet(&cfg, Label::Gluon, 6));
    }

    #[test]
    fn gluon_multiplicity_matches_poisson_mean() {
        let cfg = SynthConfig::default();
        let n = 10_000;
        let counts: Vec<f64> = (0..n).map(|i| sample_jet(&cfg, Label::Gluon, i).n_particles as f64).collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        // 1 + Poisson(26): variance 26
        let se = (26.0f64 / n as f64).sqrt();
        assert!((mean - 27.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn hits_stay_within_unit_delta_r() {
        let cfg = SynthConfig {
            width_gluon: 0.6,
            ..SynthConfig::default()
        };
        for i in 0..200 {
            let ev = sample_jet(&cfg, Label::Gluon, i);
            for h in &ev.hits {
                let dphi = wrap_phi(h.phi - ev.true_phi);
                assert!((h.eta - ev.true_eta).powi(2) + dphi * dphi < 1.0 + 1e-12);
                assert!(h.phi > -PI && h.phi <= PI);
                assert!(h.value >= 0.0);
            }
        }
    }

    fn event(jet_pt: f64, true_eta: f64) -> JetEvent {
        JetEvent {
            hits: Vec::new(),
            true_eta,
            true_phi: 0.0,
            label: Label::Quark,
            jet_pt,
            n_particles: 0,
        }
    }

    #[test]
    fn selection_boundaries() {
        assert!(!apply_selection(&event(70.0, 0.0)));
        assert!(apply_selection(&event(90.0, 0.0)));
        assert!(!apply_selection(&event(90.0, 1.9)));
        assert!(!apply_selection(&event(90.0, -1.8)));
    }

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let cfg = SynthConfig::preset(Separability::Easy, 3);
        let a = generate_dataset(&cfg, 1).unwrap();
        assert_eq!(a.len(), 2);
        let mut labels: Vec<_> = a.iter().map(|w| w.label.unwrap()).collect();
        labels.sort();
        assert_eq!(labels, [Label::Gluon, Label::Quark]);
        assert_eq!(a, generate_dataset(&cfg, 1).unwrap());
        let b = generate_dataset(&cfg, 5).unwrap();
        assert_eq!(b.iter().filter(|w| w.label == Some(Label::Quark)).count(), 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SynthConfig {
            photon_frac: 0.3,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            width_quark: 0.0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(generate_dataset(&SynthConfig::default(), 0).is_err());
    }

    #[test]
    fn wide_axis_range_surfaces_eta_out_of_range() {
        let cfg = SynthConfig {
            axis_eta_max: 1.79,
            ..SynthConfig::default()
        };
        let err = generate_dataset(&cfg, 200).unwrap_err();
        assert!(matches!(err, SynthError::Detector(DetectorError::EtaOutOfRange { .. })));
    }
}
