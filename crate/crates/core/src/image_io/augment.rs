use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GrayImage, Patch};
use crate::distance_codec::SignedDistMap;
use crate::grid::Grid;

/// The eight symmetries of the square: rotations by multiples of 90 degrees
/// and reflections. Rotations are counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dihedral {
    Identity,
    FlipH,
    FlipV,
    Transpose,
    Rot90,
    Rot180,
    Rot270,
    /// `FlipH` applied after `Rot90`: reflection about the anti-diagonal.
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::AntiTranspose,
    ];

    pub fn inverse(self) -> Dihedral {
        match self {
            Dihedral::Rot90 => Dihedral::Rot270,
            Dihedral::Rot270 => Dihedral::Rot90,
            other => other,
        }
    }

    fn swaps_axes(self) -> bool {
        matches!(
            self,
            Dihedral::Transpose | Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::AntiTranspose
        )
    }

    /// Source pixel of output pixel `(x, y)` for an input of `w` x `h`.
    #[inline]
    fn source(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        match self {
            Dihedral::Identity => (x, y),
            Dihedral::FlipH => (w - 1 - x, y),
            Dihedral::FlipV => (x, h - 1 - y),
            Dihedral::Transpose => (y, x),
            Dihedral::Rot90 => (w - 1 - y, x),
            Dihedral::Rot180 => (w - 1 - x, h - 1 - y),
            Dihedral::Rot270 => (y, h - 1 - x),
            Dihedral::AntiTranspose => (w - 1 - y, h - 1 - x),
        }
    }

    pub fn apply<T: Clone>(self, grid: &Grid<T>) -> Grid<T> {
        let (w, h) = grid.dims();
        let (ow, oh) = if self.swaps_axes() { (h, w) } else { (w, h) };
        Grid::from_fn(ow, oh, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            grid.get(sx, sy).clone()
        })
    }

    pub fn apply_image(self, image: &GrayImage) -> GrayImage {
        let scale = if self.swaps_axes() {
            super::Scale {
                x_um: image.scale.y_um,
                y_um: image.scale.x_um,
            }
        } else {
            image.scale
        };
        GrayImage::new(self.apply(&image.pixels), scale)
    }

    pub fn apply_patch(self, patch: &Patch) -> Patch {
        Patch {
            image: self.apply_image(&patch.image),
            target: patch
                .target
                .as_ref()
                .map(|t| SignedDistMap::from_grid(self.apply(t.grid()))),
        }
    }

    pub fn random(rng: &mut impl Rng) -> Dihedral {
        Dihedral::ALL[rng.random_range(0..Dihedral::ALL.len())]
    }
}

/// Applies one uniformly drawn symmetry to both the image and its target.
pub fn augment(patch: &Patch, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dihedral::random(&mut rng).apply_patch(patch)
}
