//! Peak extraction over detector score windows.
//!
//! The detector is only run inside a window around the expected target
//! position. Scores are softmax-normalized, local maxima survive a greedy
//! non-maximum suppression, and instead of blindly taking the global
//! maximum the peak closest to the predicted position wins — a distractor
//! that happens to score higher on one frame does not capture the track
//! unless it also sits closer to where the trajectory says the target is.

use thiserror::Error;

use crate::geometry::{Intrinsics, Vec2};
use crate::grid::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeakError {
    #[error("no candidate peaks in the score window")]
    NoCandidates,
}

/// Placement of a score window inside the full-resolution image: cell
/// (r, c) is centered on pixel `origin + stride * (c, r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWindow {
    pub origin: Vec2,
    /// (columns, rows).
    pub cells: (usize, usize),
    pub stride: f64,
}

impl ScoreWindow {
    pub fn centered(center: Vec2, cells: (usize, usize), stride: f64) -> Self {
        let half = Vec2::new((cells.0 - 1) as f64, (cells.1 - 1) as f64) * (stride / 2.0);
        Self { origin: center - half, cells, stride }
    }

    pub fn pixel_of(&self, row: usize, col: usize) -> Vec2 {
        self.origin + Vec2::new(col as f64, row as f64) * self.stride
    }

    pub fn center(&self) -> Vec2 {
        self.pixel_of(0, 0).lerp(&self.pixel_of(self.cells.1 - 1, self.cells.0 - 1), 0.5)
    }

    /// Shifts the window so it lies inside the image; a window larger than
    /// the image collapses onto the image center.
    pub fn clamped_to(self, intr: &Intrinsics) -> Self {
        let extent = Vec2::new(self.cells.0 as f64, self.cells.1 as f64) * self.stride;
        let clamp_axis = |center: f64, extent: f64, dim: f64| {
            if extent >= dim {
                dim / 2.0
            } else {
                center.clamp(extent / 2.0, dim - extent / 2.0)
            }
        };
        let c = self.center();
        let center = Vec2::new(
            clamp_axis(c.x, extent.x, intr.width as f64),
            clamp_axis(c.y, extent.y, intr.height as f64),
        );
        Self::centered(center, self.cells, self.stride)
    }
}

/// Builds the window for this frame: centered on the predicted pixel when
/// one is available and finite, otherwise on the previous center, and
/// clamped into the image.
pub fn center_window(
    predicted: Option<Vec2>,
    previous: Vec2,
    cells: (usize, usize),
    stride: f64,
    intr: &Intrinsics,
) -> ScoreWindow {
    let center = match predicted {
        Some(p) if p.x.is_finite() && p.y.is_finite() => p,
        _ => previous,
    };
    ScoreWindow::centered(center, cells, stride).clamped_to(intr)
}

/// Raw detector responses over a window.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub window: ScoreWindow,
    pub scores: Grid<f32>,
}

impl ScoreMap {
    /// Largest finite raw response, if any.
    pub fn max_raw(&self) -> Option<f32> {
        self.scores.data().iter().copied().filter(|v| v.is_finite()).reduce(f32::max)
    }
}

/// Scores turned into a probability field (f64 accumulation, stable under
/// constant shifts). Non-finite cells get probability zero.
pub fn softmax_normalize(map: &ScoreMap) -> Grid<f64> {
    let mut probs = Grid::filled(map.scores.width(), map.scores.height(), 0.0f64);
    let Some(max) = map.max_raw() else {
        return probs;
    };
    let mut sum = 0.0f64;
    for (i, &s) in map.scores.data().iter().enumerate() {
        if s.is_finite() {
            let e = ((s - max) as f64).exp();
            probs.data_mut()[i] = e;
            sum += e;
        }
    }
    for v in probs.data_mut() {
        *v /= sum;
    }
    probs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    /// Full-resolution pixel of the peak cell center.
    pub pixel: Vec2,
    /// Softmax probability of the cell.
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct PeakConfig {
    /// Suppression radius in cells (Euclidean).
    pub nms_radius: f64,
    /// Candidates must reach this fraction of the strongest probability.
    pub keep_fraction: f64,
    /// Refine peak pixels to sub-cell precision with a 1D parabolic fit
    /// per axis.
    pub parabolic_refine: bool,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { nms_radius: 2.0, keep_fraction: 0.8, parabolic_refine: false }
    }
}

/// Sub-cell offset of a peak along one axis from the parabola through the
/// probabilities at -1, 0, +1 cells; zero when the vertex is ill-defined.
fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Greedy non-maximum suppression over the probability field: walk cells
/// in decreasing probability (ties by index), keep a cell when no kept
/// peak lies within the radius, stop below `keep_fraction` of the maximum.
pub fn find_peaks(map: &ScoreMap, probs: &Grid<f64>, cfg: &PeakConfig) -> Vec<Peak> {
    let mut order: Vec<usize> = (0..probs.data().len()).filter(|&i| probs.data()[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs.data()[b].total_cmp(&probs.data()[a]).then(a.cmp(&b)));
    let Some(&top) = order.first() else {
        return Vec::new();
    };
    let floor = probs.data()[top] * cfg.keep_fraction;
    let w = probs.width();
    let r2 = cfg.nms_radius * cfg.nms_radius;
    let mut peaks: Vec<Peak> = Vec::new();
    for i in order {
        let p = probs.data()[i];
        if p < floor {
            break;
        }
        let (row, col) = (i / w, i % w);
        let suppressed = peaks.iter().any(|q| {
            let (dr, dc) = (row as f64 - q.row as f64, col as f64 - q.col as f64);
            dr * dr + dc * dc <= r2
        });
        if !suppressed {
            let mut pixel = map.window.pixel_of(row, col);
            if cfg.parabolic_refine {
                let at = |r: isize, c: isize| -> f64 {
                    if r < 0 || c < 0 || r as usize >= probs.height() || c as usize >= w {
                        0.0
                    } else {
                        probs.get(r as usize, c as usize)
                    }
                };
                let (ri, ci) = (row as isize, col as isize);
                let dx = parabolic_offset(at(ri, ci - 1), p, at(ri, ci + 1));
                let dy = parabolic_offset(at(ri - 1, ci), p, at(ri + 1, ci));
                pixel += Vec2::new(dx, dy) * map.window.stride;
            }
            peaks.push(Peak { row, col, pixel, prob: p });
        }
    }
    peaks
}

/// The peak nearest to the reference pixel (the trajectory prediction);
/// ties fall to the higher probability, then the earlier peak.
pub fn select_peak<'a>(peaks: &'a [Peak], reference: Vec2) -> Result<&'a Peak, PeakError> {
    peaks
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            let (da, db) = ((a.pixel - reference).norm(), (b.pixel - reference).norm());
            da.total_cmp(&db).then(b.prob.total_cmp(&a.prob)).then(ia.cmp(ib))
        })
        .map(|(_, p)| p)
        .ok_or(PeakError::NoCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map_from(scores: Vec<f32>, w: usize, h: usize, origin: Vec2, stride: f64) -> ScoreMap {
        ScoreMap {
            window: ScoreWindow { origin, cells: (w, h), stride },
            scores: Grid::from_vec(w, h, scores),
        }
    }

    fn bump(grid: &mut Grid<f32>, cr: usize, cc: usize, amp: f32, sigma: f32) {
        for r in 0..grid.height() {
            for c in 0..grid.width() {
                let d2 = (r as f32 - cr as f32).powi(2) + (c as f32 - cc as f32).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                if v > grid.get(r, c) {
                    grid.set(r, c, v);
                }
            }
        }
    }

    #[test]
    fn window_centering_and_pixel_mapping() {
        let intr = Intrinsics::new(400.0, 400.0, 512.0, 512.0, 1024, 1024);
        let w = center_window(Some(Vec2::new(500.0, 300.0)), Vec2::zeros(), (61, 61), 4.0, &intr);
        assert_abs_diff_eq!(w.center().x, 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.center().y, 300.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.pixel_of(30, 30).x, 500.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.pixel_of(0, 0).x, 500.0 - 30.0 * 4.0, epsilon = 1e-12);

        // Near the border the window shifts inward.
        let w = center_window(Some(Vec2::new(10.0, 1020.0)), Vec2::zeros(), (61, 61), 4.0, &intr);
        assert_abs_diff_eq!(w.center().x, 122.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.center().y, 1024.0 - 122.0, epsilon = 1e-12);

        // A non-finite prediction falls back to the previous center.
        let w = center_window(
            Some(Vec2::new(f64::NAN, 0.0)),
            Vec2::new(400.0, 400.0),
            (61, 61),
            4.0,
            &intr,
        );
        assert_abs_diff_eq!(w.center().x, 400.0, epsilon = 1e-12);
        let w = center_window(None, Vec2::new(400.0, 400.0), (61, 61), 4.0, &intr);
        assert_abs_diff_eq!(w.center().y, 400.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shift() {
        let mut a = map_from(vec![0.0; 100], 10, 10, Vec2::zeros(), 1.0);
        for (i, v) in a.scores.data_mut().iter_mut().enumerate() {
            // Multiples of 1/64 stay exact under the +8 shift below.
            *v = ((i as f32 * 0.37).sin() * 64.0).round() / 64.0;
        }
        let mut b = a.clone();
        for v in b.scores.data_mut() {
            *v += 8.0;
        }
        let (pa, pb) = (softmax_normalize(&a), softmax_normalize(&b));
        let sum: f64 = pa.data().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        // Argmax is preserved.
        let argmax = |g: &Grid<f64>| {
            g.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
        };
        let raw_argmax = a
            .scores
            .data()
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        assert_eq!(argmax(&pa), raw_argmax);
    }

    #[test]
    fn softmax_zeroes_invalid_cells() {
        let mut m = map_from(vec![1.0; 9], 3, 3, Vec2::zeros(), 1.0);
        m.scores.set(1, 1, f32::NAN);
        let p = softmax_normalize(&m);
        assert_eq!(p.get(1, 1), 0.0);
        assert_abs_diff_eq!(p.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.get(0, 0), 1.0 / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn nms_keeps_separated_bumps_and_drops_weak_ones() {
        let mut m = map_from(vec![0.0; 3600], 60, 60, Vec2::zeros(), 4.0);
        bump(&mut m.scores, 20, 15, 1.0, 1.2);
        bump(&mut m.scores, 20, 45, 0.98, 1.2);
        bump(&mut m.scores, 45, 30, 0.30, 1.2); // far below the keep fraction
        let probs = softmax_normalize(&m);
        let peaks = find_peaks(&m, &probs, &PeakConfig::default());
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        assert_eq!((peaks[0].row, peaks[0].col), (20, 15));
        assert_eq!((peaks[1].row, peaks[1].col), (20, 45));
        assert!(peaks[1].prob <= peaks[0].prob);
    }

    #[test]
    fn nms_merges_peaks_within_the_radius() {
        let mut m = map_from(vec![0.0; 900], 30, 30, Vec2::zeros(), 1.0);
        m.scores.set(10, 10, 1.0);
        m.scores.set(10, 11, 0.999); // inside the radius of the first
        m.scores.set(10, 14, 0.998); // outside
        let probs = softmax_normalize(&m);
        let peaks = find_peaks(&m, &probs, &PeakConfig::default());
        let cells: Vec<(usize, usize)> = peaks.iter().map(|p| (p.row, p.col)).collect();
        assert_eq!(cells, vec![(10, 10), (10, 14)]);
    }

    #[test]
    fn selection_prefers_the_peak_near_the_prediction() {
        let mut m = map_from(vec![0.0; 3600], 60, 60, Vec2::new(100.0, 100.0), 4.0);
        bump(&mut m.scores, 30, 10, 0.97, 1.2); // near the prediction
        bump(&mut m.scores, 30, 50, 1.0, 1.2); // stronger, but far away
        let probs = softmax_normalize(&m);
        let peaks = find_peaks(&m, &probs, &PeakConfig::default());
        assert_eq!(peaks.len(), 2);

        let near_px = m.window.pixel_of(30, 10);
        let chosen = select_peak(&peaks, near_px + Vec2::new(3.0, -2.0)).unwrap();
        assert_eq!((chosen.row, chosen.col), (30, 10));

        // Equidistant: probability breaks the tie toward the global max.
        let mid = (m.window.pixel_of(30, 10) + m.window.pixel_of(30, 50)) / 2.0;
        let chosen = select_peak(&peaks, mid).unwrap();
        assert_eq!((chosen.row, chosen.col), (30, 50));

        assert_eq!(select_peak(&[], mid).unwrap_err(), PeakError::NoCandidates);
    }

    #[test]
    fn parabolic_refinement_recovers_sub_cell_offsets() {
        // A bump whose true center sits 0.3 cells right of cell 20.
        let mut m = map_from(vec![0.0; 1600], 40, 40, Vec2::zeros(), 4.0);
        for r in 0..40 {
            for c in 0..40 {
                let d2 = (r as f32 - 20.0).powi(2) + (c as f32 - 20.3).powi(2);
                m.scores.set(r, c, (-d2 / (2.0 * 2.5f32.powi(2))).exp());
            }
        }
        let probs = softmax_normalize(&m);
        let coarse = find_peaks(&m, &probs, &PeakConfig::default());
        let fine = find_peaks(
            &m,
            &probs,
            &PeakConfig { parabolic_refine: true, ..PeakConfig::default() },
        );
        let truth = m.window.pixel_of(20, 20) + Vec2::new(0.3 * 4.0, 0.0);
        let coarse_err = (coarse[0].pixel - truth).norm();
        let fine_err = (fine[0].pixel - truth).norm();
        assert!(fine_err < 0.3 * coarse_err, "coarse {coarse_err}, fine {fine_err}");
    }

    #[test]
    fn equal_plateau_resolves_to_the_lowest_index() {
        let m = map_from(vec![1.0; 100], 10, 10, Vec2::zeros(), 1.0);
        let probs = softmax_normalize(&m);
        let peaks = find_peaks(&m, &probs, &PeakConfig::default());
        assert_eq!((peaks[0].row, peaks[0].col), (0, 0));
        // The whole plateau ties at the keep fraction, so the greedy pass
        // packs peaks at the suppression spacing, deterministically.
        let again = find_peaks(&m, &probs, &PeakConfig::default());
        assert_eq!(peaks, again);
    }
}
