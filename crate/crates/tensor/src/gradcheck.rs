//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever calls the scalar function being checked, so it
//! shares no code with the backward pass.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One scalar weight: parameter plus flat element index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub coord: Coord,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Denominators below this are treated as this value, so that vanishing
/// gradients are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(w + h) - f(w - h)) / 2h` for one coordinate; restores the weight afterwards.
pub fn central_difference(store: &mut ParamStore, coord: Coord, h: f64, mut f: impl FnMut(&ParamStore) -> f64) -> f64 {
    let original = store.get(coord.param).data()[coord.index];
    store.get_mut(coord.param).data_mut()[coord.index] = original + h;
    let plus = f(store);
    store.get_mut(coord.param).data_mut()[coord.index] = original - h;
    let minus = f(store);
    store.get_mut(coord.param).data_mut()[coord.index] = original;
    (plus - minus) / (2.0 * h)
}

/// Central difference of `sum(terms)` where `f` returns the terms separately.
///
/// Each term is differenced before summation so that a small term is not
/// absorbed by the rounding of a large one.
pub fn central_difference_terms(
    store: &mut ParamStore,
    coord: Coord,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> Vec<f64>,
) -> f64 {
    let original = store.get(coord.param).data()[coord.index];
    store.get_mut(coord.param).data_mut()[coord.index] = original + h;
    let plus = f(store);
    store.get_mut(coord.param).data_mut()[coord.index] = original - h;
    let minus = f(store);
    store.get_mut(coord.param).data_mut()[coord.index] = original;
    assert_eq!(plus.len(), minus.len(), "term count changed under perturbation");
    let mut diffs: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| p - m).collect();
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    diffs.iter().sum::<f64>() / (2.0 * h)
}

/// Compares `analytic` (one gradient tensor per parameter, store order) with
/// central differences at each coordinate.
pub fn check_coords(
    store: &mut ParamStore,
    analytic: &[Tensor],
    coords: &[Coord],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<CoordCheck> {
    coords
        .iter()
        .map(|&coord| {
            let numeric = central_difference(store, coord, h, &mut f);
            let a = analytic[coord.param.0].data()[coord.index];
            CoordCheck {
                coord,
                name: store.name(coord.param).to_string(),
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            }
        })
        .collect()
}

/// Draws `n` distinct coordinates, spreading them over parameters first so
/// that every selected tensor contributes at least one coordinate.
pub fn sample_coords(store: &ParamStore, params: &[ParamId], n: usize, rng: &mut ChaCha8Rng) -> Vec<Coord> {
    let mut order: Vec<ParamId> = params.to_vec();
    order.shuffle(rng);
    let mut out: Vec<Coord> = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        let before = out.len();
        for &p in &order {
            if out.len() == n {
                break;
            }
            let len = store.get(p).len();
            let taken = out.iter().filter(|c| c.param == p).count();
            if taken > round || taken >= len {
                continue;
            }
            loop {
                let c = Coord { param: p, index: rng.gen_range(0..len) };
                if !out.contains(&c) {
                    out.push(c);
                    break;
                }
            }
        }
        if out.len() == before {
            break;
        }
        round += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn central_difference_of_cubic() {
        let mut store = ParamStore::new();
        let p = store.insert("x", Tensor::new([1], vec![2.0]));
        let d = central_difference(&mut store, Coord { param: p, index: 0 }, 1e-5, |s| s.get(p).data()[0].powi(3));
        assert!((d - 12.0).abs() < 1e-8);
        assert_eq!(store.get(p).data()[0], 2.0);
    }

    #[test]
    fn sampling_covers_each_parameter() {
        let mut store = ParamStore::new();
        let ids: Vec<_> = (0..4).map(|i| store.insert(format!("p{i}"), Tensor::zeros([3]))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let coords = sample_coords(&store, &ids, 10, &mut rng);
        assert_eq!(coords.len(), 10);
        for id in &ids {
            assert!(coords.iter().any(|c| c.param == *id));
        }
    }
}
