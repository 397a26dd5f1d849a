#![allow(dead_code)]

use endoseg::annotation::{begin_session, Edit, EditSession};
use endoseg::postprocess::{LabelMap, RegionClass};
use endoseg::synth::{self, SynthConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

/// Session over the ground truth of a small synthetic image.
pub fn synthetic_session(seed: u64, size: usize, n_cells: usize, guttae_fraction: f64) -> EditSession {
    let config = SynthConfig { width: size, height: size, n_cells, guttae_fraction, seed, ..SynthConfig::default() };
    let (image, masks) = synth::generate(&config).unwrap();
    begin_session(image, Some(masks)).unwrap()
}

pub fn centroid(map: &LabelMap, label: u32) -> (i64, i64) {
    let w = map.width();
    let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
    for (i, &l) in map.labels().as_slice().iter().enumerate() {
        if l == label {
            sx += i % w;
            sy += i / w;
            n += 1;
        }
    }
    ((sx / n.max(1)) as i64, (sy / n.max(1)) as i64)
}

/// Straight cut through the centroid of `label` at `angle`, long enough
/// to leave the region on both sides.
pub fn cut_through(map: &LabelMap, label: u32, angle: f64) -> Vec<(i64, i64)> {
    let (cx, cy) = centroid(map, label);
    let r = (map.width() + map.height()) as f64;
    let (dx, dy) = ((angle.cos() * r) as i64, (angle.sin() * r) as i64);
    vec![(cx - dx, cy - dy), (cx + dx, cy + dy)]
}

/// Pairs of distinct labels that meet across a boundary pixel.
pub fn neighbor_pairs(map: &LabelMap) -> Vec<(u32, u32)> {
    let labels = map.labels();
    let s = labels.as_slice();
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..s.len() {
        if s[i] != 0 {
            continue;
        }
        let ns: Vec<u32> = labels.neighbors4(i).map(|n| s[n]).filter(|&l| l != 0).collect();
        for &a in &ns {
            for &b in &ns {
                if a < b {
                    pairs.insert((a, b));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

fn stroke(rng: &mut impl Rng, w: usize, h: usize) -> Vec<(i64, i64)> {
    let n = rng.random_range(1..4);
    (0..n).map(|_| (rng.random_range(-2..w as i64 + 2), rng.random_range(-2..h as i64 + 2))).collect()
}

/// A random edit, or `None` for an undo.
pub fn random_edit(rng: &mut impl RngCore, map: &LabelMap) -> Option<Edit> {
    let (w, h) = (map.width(), map.height());
    let labels: Vec<u32> = map.classes().keys().copied().collect();
    let class = if rng.random_bool(0.7) { RegionClass::Cell } else { RegionClass::Gutta };
    let pick = |rng: &mut dyn RngCore| labels.choose(rng).copied().unwrap_or(1);
    Some(match rng.random_range(0..10) {
        0 | 1 => {
            let label = pick(rng);
            Edit::Split { label, polyline: cut_through(map, label, rng.random_range(0.0..std::f64::consts::PI)) }
        }
        2 | 3 => match neighbor_pairs(map).choose(rng) {
            Some(&(a, b)) => Edit::Merge { a, b, force: rng.random_bool(0.5) },
            None => Edit::Merge { a: pick(rng), b: pick(rng), force: false },
        },
        4 => Edit::SetClass { label: pick(rng), class },
        5 | 6 => {
            let label = rng.random_bool(0.5).then(|| pick(rng)).filter(|&l| map.class_of(l) == Some(class));
            Edit::Draw { class, label, points: stroke(rng, w, h), radius: rng.random_range(0..4) }
        }
        7 | 8 => Edit::Erase { points: stroke(rng, w, h), radius: rng.random_range(0..3) },
        _ => return None,
    })
}

/// Applies a random script of `len` edits, checking the label map after
/// each step and the replay invariant at the end.
pub fn run_script(session: &mut EditSession, rng: &mut impl RngCore, len: usize) -> Result<(), String> {
    for step in 0..len {
        let before = session.label_map().clone();
        let result = match random_edit(rng, session.label_map()) {
            Some(edit) => session.apply(edit.clone()).map(|_| ()).map_err(|e| format!("{edit:?}: {e}")),
            None => session.undo().map_err(|e| e.to_string()),
        };
        if result.is_err() && *session.label_map() != before {
            return Err(format!("step {step}: failed edit changed the map ({result:?})"));
        }
        session.label_map().validate().map_err(|e| format!("step {step}: {e}"))?;
    }
    let replayed = session.replay().map_err(|e| e.to_string())?;
    if replayed != *session.label_map() {
        return Err("replay diverged from the current state".into());
    }
    Ok(())
}
