//! Dense latent grids and the spatial primitives the gate is built from.
//!
//! Every buffer is row-major. A [`LatentGrid`] stores `(h, w, c)` with the
//! channel index fastest; a [`PlanarMap`] stores `(h, w)`. Patches are
//! scanned row-major over patch coordinates and each patch flattens its
//! pixels row-major.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

/// Norm below which a vector is treated as carrying no direction.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidRange(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    /// Number of scalars in a grid of this shape.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

fn check_finite<T: Scalar>(data: &[T], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// An `H x W x C` real field: a noisy latent or a noise prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    shape: GridShape,
    data: Vec<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(GridShape::new(height, width, channels)?, data)
    }

    pub fn from_vec(shape: GridShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {shape}", shape.len()),
                found: format!("{} values", data.len()),
            });
        }
        check_finite(&data, "latent grid")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: GridShape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a grid from `f(h, w, c)`; panics if `f` yields a non-finite value.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for h in 0..shape.height {
            for w in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(h, w, c));
                }
            }
        }
        assert!(data.iter().all(|v| v.is_finite()), "non-finite grid value");
        Self { shape, data }
    }

    /// Internal constructor for values derived from already-validated grids.
    pub(crate) fn from_raw(shape: GridShape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }
    pub fn height(&self) -> usize {
        self.shape.height
    }
    pub fn width(&self) -> usize {
        self.shape.width
    }
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.index(h, w, c)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two grids of identical shape.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self::from_raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                found: other.shape.to_string(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        norm(&self.data)
    }
}

/// An `H x W` real map (one value per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> PlanarMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidRange(format!(
                "map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {height}x{width}", height * width),
                found: format!("{} values", data.len()),
            });
        }
        check_finite(&data, "planar map")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(height * width, data.len());
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
    pub fn get(&self, h: usize, w: usize) -> T {
        self.data[h * self.width + w]
    }
}

/// Block geometry for tokenizing a planar map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub patch_height: usize,
    pub patch_width: usize,
}

impl PatchLayout {
    pub fn square(size: usize) -> Self {
        Self {
            patch_height: size,
            patch_width: size,
        }
    }

    /// One patch covering the whole `height x width` map.
    pub fn whole(height: usize, width: usize) -> Self {
        Self {
            patch_height: height,
            patch_width: width,
        }
    }

    /// Returns `(patch_rows, patch_cols)` for a map, or `NonDivisiblePatch`.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (self.patch_height, self.patch_width);
        if ph == 0 || pw == 0 || !height.is_multiple_of(ph) || !width.is_multiple_of(pw) {
            return Err(Error::NonDivisiblePatch {
                patch: if ph == pw { ph } else { ph.max(pw) },
                height,
                width,
            });
        }
        Ok((height / ph, width / pw))
    }
}

/// `P` flattened patch vectors of a planar map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    patch_rows: usize,
    patch_cols: usize,
    layout: PatchLayout,
    vectors: Vec<T>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn patch_count(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.layout.patch_height * self.layout.patch_width
    }

    pub fn layout(&self) -> PatchLayout {
        self.layout
    }

    /// `(patch_rows, patch_cols)`: the shape of the per-patch grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.patch_rows, self.patch_cols)
    }

    pub fn patch(&self, p: usize) -> &[T] {
        let d = self.patch_dim();
        &self.vectors[p * d..(p + 1) * d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.vectors.chunks(self.patch_dim())
    }

    /// Scatters the patches back into the map they were cut from.
    pub fn unpatchify(&self) -> PlanarMap<T> {
        let (ph, pw) = (self.layout.patch_height, self.layout.patch_width);
        let (height, width) = (self.patch_rows * ph, self.patch_cols * pw);
        let mut data = vec![T::zero(); height * width];
        for (p, patch) in self.iter().enumerate() {
            let (pr, pc) = (p / self.patch_cols, p % self.patch_cols);
            for (k, &v) in patch.iter().enumerate() {
                let (dy, dx) = (k / pw, k % pw);
                data[(pr * ph + dy) * width + pc * pw + dx] = v;
            }
        }
        PlanarMap::from_raw(height, width, data)
    }
}

/// Averages a grid over its channel axis.
pub fn channel_mean<T: Scalar>(grid: &LatentGrid<T>) -> PlanarMap<T> {
    let c = grid.channels();
    let inv = T::one() / T::of(c as f64);
    let data = grid
        .as_slice()
        .chunks(c)
        .map(|px| px.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
        .collect();
    PlanarMap::from_raw(grid.height(), grid.width(), data)
}

/// Tokenizes a map into non-overlapping `d x d` patches.
pub fn patchify<T: Scalar>(map: &PlanarMap<T>, d: usize) -> Result<PatchSet<T>> {
    patchify_with(map, PatchLayout::square(d))
}

pub fn patchify_with<T: Scalar>(map: &PlanarMap<T>, layout: PatchLayout) -> Result<PatchSet<T>> {
    let (rows, cols) = layout.grid_for(map.height(), map.width())?;
    let (ph, pw) = (layout.patch_height, layout.patch_width);
    let mut vectors = Vec::with_capacity(map.height() * map.width());
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..ph {
                let row = (pr * ph + dy) * map.width() + pc * pw;
                vectors.extend_from_slice(&map.as_slice()[row..row + pw]);
            }
        }
    }
    Ok(PatchSet {
        patch_rows: rows,
        patch_cols: cols,
        layout,
        vectors,
    })
}

/// Cosine similarity; zero when either vector has norm below [`ZERO_NORM_EPS`].
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    let eps = T::of(ZERO_NORM_EPS);
    if na < eps || nb < eps {
        return Ok(T::zero());
    }
    let cos = dot(a, b) / (na * nb);
    Ok(cos.max(-T::one()).min(T::one()))
}

/// Repeats each per-patch value over its `d x d` block (Kronecker product with a block of ones).
pub fn kron_upsample<T: Scalar>(weights: &PlanarMap<T>, d: usize) -> PlanarMap<T> {
    kron_upsample_with(weights, PatchLayout::square(d))
}

pub fn kron_upsample_with<T: Scalar>(weights: &PlanarMap<T>, layout: PatchLayout) -> PlanarMap<T> {
    let (ph, pw) = (layout.patch_height, layout.patch_width);
    let (height, width) = (weights.height() * ph, weights.width() * pw);
    let mut data = Vec::with_capacity(height * width);
    for h in 0..height {
        let src = &weights.as_slice()[(h / ph) * weights.width()..(h / ph + 1) * weights.width()];
        for &v in src {
            data.extend(std::iter::repeat_n(v, pw));
        }
    }
    PlanarMap::from_raw(height, width, data)
}
