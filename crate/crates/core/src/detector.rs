//! Detector hits to η–φ images and jet-centred windows.
//!
//! The full-detector grid is 280 η rows × 360 φ columns over |η| < 3. Track
//! and ECAL hits are binned directly on that grid; HCAL hits are binned on the
//! coarser tower grid (one tower per 5×5 fine pixels) and replicated into each
//! fine block. Jet windows are 125×125 crops that wrap around in φ and are
//! never padded in η.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use num_traits::Euclid;
use thiserror::Error;

use crate::{Image, Label};

/// Side of a jet window in fine pixels.
pub const WINDOW_SIZE: usize = 125;
/// Pixels on each side of the window centre.
pub const WINDOW_HALF: usize = WINDOW_SIZE / 2;
/// Half-width of the HCAL tower neighbourhood searched for the window centre.
pub const TOWER_SEARCH_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Track = 0,
    Ecal = 1,
    Hcal = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Track, Channel::Ecal, Channel::Hcal];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("polar angle {0} outside (0, pi)")]
    ThetaOutOfDomain(f64),
    #[error("window centre row {row} leaves fewer than {half} rows to a detector edge", half = WINDOW_HALF)]
    EtaOutOfRange { row: usize },
    #[error("jet axis eta {0} outside the detector grid")]
    AxisOutsideGrid(f64),
    #[error("expected a {expected_rows}x{expected_cols} tower grid, got {rows}x{cols} ({len} values)")]
    DimensionMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("grid {n_eta}x{n_phi} is not divisible by the HCAL factor {factor}")]
    BadGrid { n_eta: usize, n_phi: usize, factor: usize },
}

/// One reconstructed deposit: energy (ECAL/HCAL) or transverse momentum
/// (tracks) in GeV at (η, φ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorHit {
    pub eta: f64,
    pub phi: f64,
    pub value: f64,
    pub channel: Channel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub n_eta: usize,
    pub n_phi: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub hcal_factor: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_eta: 280,
            n_phi: 360,
            eta_min: -3.0,
            eta_max: 3.0,
            hcal_factor: 5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let f = self.hcal_factor;
        if f == 0 || self.n_eta % f != 0 || self.n_phi % f != 0 {
            return Err(DetectorError::BadGrid {
                n_eta: self.n_eta,
                n_phi: self.n_phi,
                factor: f,
            });
        }
        Ok(())
    }

    pub fn tower_rows(&self) -> usize {
        self.n_eta / self.hcal_factor
    }

    pub fn tower_cols(&self) -> usize {
        self.n_phi / self.hcal_factor
    }

    pub fn eta_bin_width(&self) -> f64 {
        (self.eta_max - self.eta_min) / self.n_eta as f64
    }

    pub fn phi_bin_width(&self) -> f64 {
        2.0 * PI / self.n_phi as f64
    }

    /// Fine row of `eta`, or `None` outside the open interval (eta_min, eta_max).
    pub fn eta_row(&self, eta: f64) -> Option<usize> {
        if !(eta > self.eta_min && eta < self.eta_max) {
            return None;
        }
        let r = ((eta - self.eta_min) / (self.eta_max - self.eta_min) * self.n_eta as f64).floor();
        Some((r as usize).min(self.n_eta - 1))
    }

    /// Fine column of `phi`, taken modulo 2π; bins cover (−π, π].
    pub fn phi_col(&self, phi: f64) -> usize {
        let u = Euclid::rem_euclid(&(phi + PI), &(2.0 * PI));
        let c = (u / (2.0 * PI) * self.n_phi as f64).floor() as usize;
        c % self.n_phi
    }

    /// η at the centre of fine row `row`.
    pub fn row_center_eta(&self, row: usize) -> f64 {
        self.eta_min + (row as f64 + 0.5) * self.eta_bin_width()
    }

    /// φ at the centre of fine column `col`, in (−π, π].
    pub fn col_center_phi(&self, col: usize) -> f64 {
        -PI + (col as f64 + 0.5) * self.phi_bin_width()
    }
}

/// Three-channel (track, ECAL, HCAL) image over the whole detector.
#[derive(Clone, Debug, PartialEq)]
pub struct FullDetectorImage {
    pub image: Image,
    pub spec: GridSpec,
    /// Hits rejected for lying outside the η acceptance.
    pub dropped_hits: usize,
}

impl FullDetectorImage {
    /// Energy of HCAL tower `(row, col)` on the native grid.
    pub fn hcal_tower(&self, row: usize, col: usize) -> f32 {
        let f = self.spec.hcal_factor;
        self.image.get(Channel::Hcal.index(), row * f, col * f)
    }

    /// The HCAL channel on the native tower grid.
    pub fn hcal_native(&self) -> Vec<f32> {
        let (rows, cols) = (self.spec.tower_rows(), self.spec.tower_cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.hcal_tower(r, c));
            }
        }
        out
    }
}

/// A 125×125 crop around a jet.
#[derive(Clone, Debug, PartialEq)]
pub struct JetWindow {
    pub image: Image,
    pub center_row: usize,
    pub center_col: usize,
    pub label: Option<Label>,
}

/// Pseudorapidity `-ln(tan(θ/2))`.
pub fn eta_from_theta(theta: f64) -> Result<f64, DetectorError> {
    if !(theta > 0.0 && theta < PI) {
        return Err(DetectorError::ThetaOutOfDomain(theta));
    }
    Ok(-(theta / 2.0).tan().ln())
}

/// Transverse momentum `sqrt(px² + py²)`.
pub fn pt_from_components(px: f64, py: f64) -> f64 {
    px.hypot(py)
}

/// Bins hits onto the full-detector grid. Deposits in the same cell add up;
/// hits outside the η acceptance are counted in `dropped_hits`.
pub fn bin_hits(hits: &[DetectorHit], spec: &GridSpec) -> Result<FullDetectorImage, DetectorError> {
    spec.validate()?;
    let f = spec.hcal_factor;
    let (tower_rows, tower_cols) = (spec.tower_rows(), spec.tower_cols());
    let mut image = Image::zeros(3, spec.n_eta, spec.n_phi);
    let mut native = vec![0.0f32; tower_rows * tower_cols];
    let mut dropped = 0;
    for hit in hits {
        let Some(row) = spec.eta_row(hit.eta) else {
            dropped += 1;
            continue;
        };
        let col = spec.phi_col(hit.phi);
        let v = hit.value as f32;
        match hit.channel {
            Channel::Track | Channel::Ecal => {
                let i = image.idx(hit.channel.index(), row, col);
                image.data[i] += v;
            }
            Channel::Hcal => native[(row / f) * tower_cols + col / f] += v,
        }
    }
    let fine = upsample_hcal(&native, tower_rows, tower_cols, spec)?;
    image.plane_mut(Channel::Hcal.index()).copy_from_slice(&fine);
    Ok(FullDetectorImage {
        image,
        spec: *spec,
        dropped_hits: dropped,
    })
}

/// Replicates every tower value into its `hcal_factor`² block of fine pixels.
pub fn upsample_hcal(
    native: &[f32],
    rows: usize,
    cols: usize,
    spec: &GridSpec,
) -> Result<Vec<f32>, DetectorError> {
    let (er, ec) = (spec.tower_rows(), spec.tower_cols());
    if rows != er || cols != ec || native.len() != rows * cols {
        return Err(DetectorError::DimensionMismatch {
            expected_rows: er,
            expected_cols: ec,
            rows,
            cols,
            len: native.len(),
        });
    }
    let f = spec.hcal_factor;
    let mut fine = vec![0.0f32; spec.n_eta * spec.n_phi];
    for (r, fine_rows) in fine.chunks_mut(spec.n_phi).enumerate() {
        let src = &native[(r / f) * cols..(r / f + 1) * cols];
        for (c, v) in fine_rows.iter_mut().enumerate() {
            *v = src[c / f];
        }
    }
    Ok(fine)
}

/// Centre of the jet window in fine coordinates: the centre pixel of the
/// hottest HCAL tower within ±4 towers of the jet axis tower (φ wraps, η is
/// truncated at the edges). Equal maxima go to the smallest (row, col); with
/// no HCAL energy in the neighbourhood the axis tower itself is used.
pub fn find_window_center(
    image: &FullDetectorImage,
    jet_eta: f64,
    jet_phi: f64,
) -> Result<(usize, usize), DetectorError> {
    let spec = &image.spec;
    let f = spec.hcal_factor;
    let row = spec
        .eta_row(jet_eta)
        .ok_or(DetectorError::AxisOutsideGrid(jet_eta))?;
    let axis = (row / f, spec.phi_col(jet_phi) / f);
    let best = hottest_tower(spec, axis, |r, c| image.hcal_tower(r, c));
    Ok((best.0 * f + f / 2, best.1 * f + f / 2))
}

fn hottest_tower(spec: &GridSpec, axis: (usize, usize), energy: impl Fn(usize, usize) -> f32) -> (usize, usize) {
    let (rows, cols) = (spec.tower_rows() as isize, spec.tower_cols() as isize);
    let radius = TOWER_SEARCH_RADIUS as isize;
    let mut best: Option<(f32, usize, usize)> = None;
    for dr in -radius..=radius {
        let r = axis.0 as isize + dr;
        if r < 0 || r >= rows {
            continue;
        }
        for dc in -radius..=radius {
            let c = (axis.1 as isize + dc).rem_euclid(cols) as usize;
            let e = energy(r as usize, c);
            let better = match best {
                None => true,
                Some((be, br, bc)) => e > be || (e == be && (r as usize, c) < (br, bc)),
            };
            if better {
                best = Some((e, r as usize, c));
            }
        }
    }
    match best {
        Some((e, r, c)) if e > 0.0 => (r, c),
        _ => axis,
    }
}

/// Crops the 125×125 window around `center`; columns wrap modulo the φ
/// extent, rows must fit without padding.
pub fn crop_jet_window(image: &FullDetectorImage, center: (usize, usize)) -> Result<JetWindow, DetectorError> {
    let spec = &image.spec;
    let (row, col) = center;
    if row < WINDOW_HALF || row + WINDOW_HALF >= spec.n_eta {
        return Err(DetectorError::EtaOutOfRange { row });
    }
    let mut out = Image::zeros(3, WINDOW_SIZE, WINDOW_SIZE);
    let col0 = col as isize - WINDOW_HALF as isize;
    let cols: Vec<usize> = (0..WINDOW_SIZE)
        .map(|j| (col0 + j as isize).rem_euclid(spec.n_phi as isize) as usize)
        .collect();
    for c in 0..3 {
        for i in 0..WINDOW_SIZE {
            let src_row = row - WINDOW_HALF + i;
            for (j, &src_col) in cols.iter().enumerate() {
                out.set(c, i, j, image.image.get(c, src_row, src_col));
            }
        }
    }
    Ok(JetWindow {
        image: out,
        center_row: row,
        center_col: col,
        label: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use proptest::prelude::*;
    use rand::Rng;

    fn hit(eta: f64, phi: f64, value: f64, channel: Channel) -> DetectorHit {
        DetectorHit {
            eta,
            phi,
            value,
            channel,
        }
    }

    #[test]
    fn eta_from_theta_examples() {
        assert!(eta_from_theta(PI / 2.0).unwrap().abs() < 1e-15);
        let theta1 = 2.0 * (-1.0f64).exp().atan();
        assert!((eta_from_theta(theta1).unwrap() - 1.0).abs() < 1e-14);
        // -ln(tan(0.375)) to 40 digits: 0.93235259594715840294938746470132160684
        assert!((eta_from_theta(0.75).unwrap() - 0.932_352_595_947_158_4).abs() < 1e-14);
        assert!((eta_from_theta(PI - 0.75).unwrap() + 0.932_352_595_947_158_4).abs() < 1e-13);
        for bad in [0.0, PI, -0.1, 4.0, f64::NAN] {
            assert!(eta_from_theta(bad).is_err());
        }
    }

    #[test]
    fn pt_examples() {
        assert_eq!(pt_from_components(3.0, 4.0), 5.0);
        assert_eq!(pt_from_components(0.0, 0.0), 0.0);
        assert_eq!(pt_from_components(-3.0, 4.0), 5.0);
    }

    #[test]
    fn single_ecal_hit_lands_in_one_pixel() {
        let img = bin_hits(&[hit(0.0, 0.0, 2.5, Channel::Ecal)], &GridSpec::default()).unwrap();
        let nonzero: Vec<_> = img.image.data.iter().enumerate().filter(|(_, &v)| v != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(*nonzero[0].1, 2.5);
        assert_eq!(nonzero[0].0, img.image.idx(1, 140, 180));
    }

    #[test]
    fn hits_in_one_cell_add() {
        let hits = [hit(0.51, 1.001, 1.0, Channel::Track), hit(0.511, 1.002, 2.0, Channel::Track)];
        let img = bin_hits(&hits, &GridSpec::default()).unwrap();
        assert_eq!(img.image.plane(0).iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(img.image.channel_sum(0), 3.0);
    }

    #[test]
    fn out_of_acceptance_hits_are_counted() {
        let hits = [hit(3.0, 0.0, 1.0, Channel::Ecal), hit(-3.2, 0.0, 1.0, Channel::Hcal), hit(2.99, 0.0, 1.0, Channel::Ecal)];
        let img = bin_hits(&hits, &GridSpec::default()).unwrap();
        assert_eq!(img.dropped_hits, 2);
        assert_eq!(img.image.channel_sum(1), 1.0);
    }

    #[test]
    fn phi_edges() {
        let spec = GridSpec::default();
        assert_eq!(spec.phi_col(PI), 0);
        assert_eq!(spec.phi_col(-PI + 1e-9), 0);
        assert_eq!(spec.phi_col(PI - 1e-9), 359);
        assert_eq!(spec.eta_row(-2.999_999), Some(0));
        assert_eq!(spec.eta_row(2.999_999), Some(279));
    }

    #[test]
    fn random_ecal_hits_conserve_energy() {
        let mut rng = stream(5, Domain::Event, 0, 0);
        let hits: Vec<_> = (0..100)
            .map(|_| hit(rng.random_range(-2.99..2.99), rng.random_range(-PI..PI), rng.random_range(0.0..50.0), Channel::Ecal))
            .collect();
        let total: f64 = hits.iter().map(|h| h.value).sum();
        let img = bin_hits(&hits, &GridSpec::default()).unwrap();
        assert!((img.image.channel_sum(1) - total).abs() <= 1e-4 * total);
    }

    #[test]
    fn upsample_examples() {
        let spec = GridSpec::default();
        let zeros = upsample_hcal(&vec![0.0; 56 * 72], 56, 72, &spec).unwrap();
        assert!(zeros.iter().all(|&v| v == 0.0));

        let mut native = vec![0.0; 56 * 72];
        native[7 * 72 + 11] = 7.0;
        let fine = upsample_hcal(&native, 56, 72, &spec).unwrap();
        for r in 0..280 {
            for c in 0..360 {
                let inside = (35..40).contains(&r) && (55..60).contains(&c);
                assert_eq!(fine[r * 360 + c], if inside { 7.0 } else { 0.0 });
            }
        }
        assert!(matches!(
            upsample_hcal(&vec![0.0; 55 * 72], 55, 72, &spec),
            Err(DetectorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn upsampled_blocks_are_constant() {
        let spec = GridSpec::default();
        let mut rng = stream(6, Domain::Event, 0, 0);
        let native: Vec<f32> = (0..56 * 72).map(|_| rng.random()).collect();
        let fine = upsample_hcal(&native, 56, 72, &spec).unwrap();
        for tr in 0..56 {
            for tc in 0..72 {
                for dr in 0..5 {
                    for dc in 0..5 {
                        assert_eq!(fine[(tr * 5 + dr) * 360 + tc * 5 + dc], native[tr * 72 + tc]);
                    }
                }
            }
        }
    }

    fn image_with_towers(towers: &[((usize, usize), f64)]) -> FullDetectorImage {
        let spec = GridSpec::default();
        let hits: Vec<_> = towers
            .iter()
            .map(|&((r, c), v)| hit(spec.row_center_eta(r * 5 + 2), spec.col_center_phi(c * 5 + 2), v, Channel::Hcal))
            .collect();
        bin_hits(&hits, &spec).unwrap()
    }

    #[test]
    fn window_center_single_tower() {
        let img = image_with_towers(&[((30, 40), 5.0)]);
        let spec = img.spec;
        let axis = (spec.row_center_eta(28 * 5), spec.col_center_phi(42 * 5));
        assert_eq!(find_window_center(&img, axis.0, axis.1).unwrap(), (152, 202));
    }

    #[test]
    fn window_center_defaults_to_axis_tower() {
        let img = image_with_towers(&[]);
        let spec = img.spec;
        let (eta, phi) = (spec.row_center_eta(100), spec.col_center_phi(3));
        assert_eq!(find_window_center(&img, eta, phi).unwrap(), (102, 2));
    }

    #[test]
    fn window_center_ties_prefer_smaller_row() {
        let img = image_with_towers(&[((31, 40), 4.0), ((29, 44), 4.0), ((33, 36), 1.0)]);
        let spec = img.spec;
        let (eta, phi) = (spec.row_center_eta(30 * 5), spec.col_center_phi(40 * 5));
        assert_eq!(find_window_center(&img, eta, phi).unwrap(), (29 * 5 + 2, 44 * 5 + 2));
    }

    #[test]
    fn window_center_wraps_in_phi() {
        let img = image_with_towers(&[((30, 70), 3.0), ((30, 3), 2.0)]);
        let spec = img.spec;
        let (eta, phi) = (spec.row_center_eta(150), spec.col_center_phi(0));
        assert_eq!(find_window_center(&img, eta, phi).unwrap(), (152, 352));
    }

    #[test]
    fn crop_wraps_columns() {
        let spec = GridSpec::default();
        let mut full = bin_hits(&[], &spec).unwrap();
        for c in 0..360 {
            full.image.set(0, 100, c, c as f32);
        }
        let w = crop_jet_window(&full, (100, 0)).unwrap();
        let cols: Vec<f32> = (0..125).map(|j| w.image.get(0, 62, j)).collect();
        let want: Vec<f32> = (298..360).chain(0..63).map(|c| c as f32).collect();
        assert_eq!(cols, want);
    }

    #[test]
    fn crop_rejects_rows_near_the_eta_edge() {
        let full = bin_hits(&[], &GridSpec::default()).unwrap();
        assert_eq!(crop_jet_window(&full, (61, 10)), Err(DetectorError::EtaOutOfRange { row: 61 }));
        assert_eq!(crop_jet_window(&full, (218, 10)), Err(DetectorError::EtaOutOfRange { row: 218 }));
        assert!(crop_jet_window(&full, (62, 10)).is_ok());
        assert!(crop_jet_window(&full, (217, 10)).is_ok());
    }

    #[test]
    fn seam_deposit_survives_crop() {
        let spec = GridSpec::default();
        let hits = [
            hit(0.0, PI - 0.001, 4.0, Channel::Ecal),
            hit(0.0, -PI + 0.001, 6.0, Channel::Track),
            hit(0.02, PI - 0.01, 9.0, Channel::Hcal),
        ];
        let full = bin_hits(&hits, &spec).unwrap();
        let w = crop_jet_window(&full, (142, 0)).unwrap();
        for c in 0..3 {
            assert_eq!(w.image.channel_sum(c), full.image.channel_sum(c));
        }
    }

    proptest! {
        #[test]
        fn binning_is_periodic_in_phi(seed in 0u64..1000, k in -3i32..=3) {
            let mut rng = stream(seed, Domain::Event, 1, 0);
            let hits: Vec<_> = (0..50).map(|i| hit(
                rng.random_range(-2.9..2.9),
                rng.random_range(-3.1..3.1),
                rng.random_range(0.0..10.0),
                Channel::ALL[i % 3],
            )).collect();
            let shifted: Vec<_> = hits.iter().map(|h| DetectorHit { phi: h.phi + 2.0 * PI * k as f64, ..*h }).collect();
            let spec = GridSpec::default();
            prop_assert_eq!(bin_hits(&hits, &spec).unwrap(), bin_hits(&shifted, &spec).unwrap());
        }
    }
}
