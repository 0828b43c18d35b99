//! Extended-latent-space codes and the structure/appearance algebra.
//!
//! A latent code is a stack of `L` vectors of width `D`, one per modulated
//! generator layer. The first `K` rows drive the shallow layers and carry
//! structure (pose, expression, face shape); the remaining `L - K` rows carry
//! appearance (illumination, colour, skin tone).
//!
//! All code types wrap a [`Tensor`] whose two trailing dimensions are
//! `(rows, width)`. An optional leading batch dimension is allowed so the same
//! algebra runs unchanged inside the training graph. Operations never mutate
//! their inputs.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Number of structure rows for a code of `num_vectors` rows.
///
/// `K = round(7 L / 18)` (half away from zero), clamped to `[1, L - 1]`, which
/// gives the 7-of-18 split at 1024x1024 and keeps the same proportion at
/// smaller resolutions.
pub fn structure_split_index(num_vectors: usize) -> Result<usize> {
    if num_vectors < 2 {
        return Err(Error::InvalidConfig(format!(
            "a latent code needs at least 2 vectors, got {num_vectors}"
        )));
    }
    let k = (7 * num_vectors + 9) / 18;
    Ok(k.clamp(1, num_vectors - 1))
}

fn row_dim(t: &Tensor, what: &'static str) -> Result<usize> {
    match t.rank() {
        2 | 3 => Ok(t.rank() - 2),
        r => Err(Error::shape(
            what,
            format!("expected a (rows, width) or (batch, rows, width) tensor, got rank {r}"),
        )),
    }
}

fn check_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite entries")))
    }
}

macro_rules! block_type {
    ($(#[$doc:meta])* $name:ident, $what:literal) => {
        $(#[$doc])*
        #[derive(Clone, Debug)]
        pub struct $name(Tensor);

        impl $name {
            pub fn new(t: Tensor) -> Result<Self> {
                row_dim(&t, $what)?;
                check_finite(&t, $what)?;
                Ok(Self(t))
            }

            /// Wraps a tensor coming out of the graph without a finiteness scan.
            #[allow(dead_code)]
            pub(crate) fn from_graph(t: Tensor) -> Self {
                Self(t)
            }

            pub fn from_rows(rows: &[Vec<f64>], device: &Device) -> Result<Self> {
                Self::new(rows_to_tensor(rows, device, $what)?)
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn rows(&self) -> usize {
                let dims = self.0.dims();
                dims[dims.len() - 2]
            }

            pub fn width(&self) -> usize {
                let dims = self.0.dims();
                dims[dims.len() - 1]
            }

            pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
                tensor_to_rows(&self.0)
            }
        }
    };
}

block_type!(
    /// The first `K` rows of a latent code.
    StructureCode,
    "structure code"
);
block_type!(
    /// The last `L - K` rows of a latent code.
    AppearanceCode,
    "appearance code"
);
block_type!(
    /// Additive offset applied to a structure code.
    TransferDirection,
    "transfer direction"
);

fn rows_to_tensor(rows: &[Vec<f64>], device: &Device, what: &'static str) -> Result<Tensor> {
    let width = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(what, "rows must be non-empty and of equal width"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), width), device)?)
}

fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let t = t.to_dtype(DType::F64)?;
    let t = if t.rank() == 3 {
        if t.dim(0)? != 1 {
            return Err(Error::InvalidArgument(
                "to_rows needs an unbatched code (or batch of one)".into(),
            ));
        }
        t.squeeze(0)?
    } else {
        t
    };
    Ok(t.to_vec2::<f64>()?)
}

/// A full extended-latent code with its structure/appearance split index.
#[derive(Clone, Debug)]
pub struct LatentCode {
    vectors: Tensor,
    split_index: usize,
}

impl LatentCode {
    pub fn new(vectors: Tensor, split_index: usize) -> Result<Self> {
        let code = Self::from_graph(vectors, split_index)?;
        check_finite(&code.vectors, "latent code")?;
        Ok(code)
    }

    /// Shape-checked constructor that skips the finiteness scan.
    pub(crate) fn from_graph(vectors: Tensor, split_index: usize) -> Result<Self> {
        let rd = row_dim(&vectors, "latent code")?;
        let l = vectors.dim(rd)?;
        let d = vectors.dim(rd + 1)?;
        if l < 2 || d < 1 {
            return Err(Error::shape(
                "latent code",
                format!("need L >= 2 and D >= 1, got L={l}, D={d}"),
            ));
        }
        if split_index < 1 || split_index > l - 1 {
            return Err(Error::InvalidConfig(format!(
                "split index {split_index} outside [1, {}]",
                l - 1
            )));
        }
        Ok(Self {
            vectors,
            split_index,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], split_index: usize, device: &Device) -> Result<Self> {
        Self::new(rows_to_tensor(rows, device, "latent code")?, split_index)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.vectors
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn num_vectors(&self) -> usize {
        let dims = self.vectors.dims();
        dims[dims.len() - 2]
    }

    pub fn width(&self) -> usize {
        let dims = self.vectors.dims();
        dims[dims.len() - 1]
    }

    pub fn is_batched(&self) -> bool {
        self.vectors.rank() == 3
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        tensor_to_rows(&self.vectors)
    }

    /// Selects one item of a batched code as an unbatched code.
    pub fn item(&self, index: usize) -> Result<LatentCode> {
        if !self.is_batched() {
            return Err(Error::InvalidArgument("code is not batched".into()));
        }
        LatentCode::from_graph(self.vectors.get(index)?, self.split_index)
    }
}

/// Splits `w` into its structure rows `[0, K)` and appearance rows `[K, L)`.
pub fn split_code(w: &LatentCode) -> Result<(StructureCode, AppearanceCode)> {
    let rd = w.vectors.rank() - 2;
    let k = w.split_index;
    let l = w.num_vectors();
    let g = w.vectors.narrow(rd, 0, k)?;
    let h = w.vectors.narrow(rd, k, l - k)?;
    Ok((StructureCode(g), AppearanceCode(h)))
}

/// Row-wise concatenation, structure first.
pub fn merge_code(g: &StructureCode, h: &AppearanceCode) -> Result<LatentCode> {
    let (gd, hd) = (g.0.dims(), h.0.dims());
    if g.0.rank() != h.0.rank() || g.width() != h.width() || gd[..gd.len() - 2] != hd[..hd.len() - 2] {
        return Err(Error::shape(
            "merge_code",
            format!("structure {gd:?} and appearance {hd:?} are not concatenable"),
        ));
    }
    let rd = g.0.rank() - 2;
    let vectors = Tensor::cat(&[&g.0, &h.0], rd)?;
    LatentCode::from_graph(vectors, g.rows())
}

/// `g_hat = g_s + n`, elementwise.
pub fn apply_transfer_direction(g_s: &StructureCode, n: &TransferDirection) -> Result<StructureCode> {
    if g_s.0.dims() != n.0.dims() {
        return Err(Error::shape(
            "apply_transfer_direction",
            format!("structure {:?} vs direction {:?}", g_s.0.dims(), n.0.dims()),
        ));
    }
    Ok(StructureCode((&g_s.0 + &n.0)?))
}

/// Builds the swap code `cat(g_hat, h_t)`.
pub fn compose_swap_code(g_hat: &StructureCode, h_t: &AppearanceCode) -> Result<LatentCode> {
    merge_code(g_hat, h_t).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::shape("compose_swap_code", detail),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numbered(l: usize, d: usize) -> LatentCode {
        let rows: Vec<Vec<f64>> = (0..l).map(|i| vec![i as f64; d]).collect();
        LatentCode::from_rows(&rows, structure_split_index(l).unwrap(), &Device::Cpu).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .into_iter()
            .map(f64::to_bits)
            .collect()
    }

    #[test]
    fn split_index_examples() {
        assert_eq!(structure_split_index(18).unwrap(), 7);
        assert_eq!(structure_split_index(2).unwrap(), 1);
        assert_eq!(structure_split_index(10).unwrap(), 4);
        assert!(matches!(structure_split_index(1), Err(Error::InvalidConfig(_))));
        assert!(structure_split_index(0).is_err());
    }

    #[test]
    fn split_sizes_and_order() {
        let w = numbered(18, 5);
        let (g, h) = split_code(&w).unwrap();
        assert_eq!((g.rows(), g.width()), (7, 5));
        assert_eq!((h.rows(), h.width()), (11, 5));
        let g_rows = g.to_rows().unwrap();
        for (i, row) in g_rows.iter().enumerate() {
            assert!(row.iter().all(|&v| v == i as f64));
        }
    }

    #[test]
    fn merge_blocks() {
        let dev = Device::Cpu;
        let g = StructureCode::from_rows(&vec![vec![0.0; 3]; 7], &dev).unwrap();
        let h = AppearanceCode::from_rows(&vec![vec![1.0; 3]; 11], &dev).unwrap();
        let w = merge_code(&g, &h).unwrap();
        assert_eq!(w.split_index(), 7);
        let rows = w.to_rows().unwrap();
        assert!(rows[..7].iter().flatten().all(|&v| v == 0.0));
        assert!(rows[7..].iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn merge_width_mismatch() {
        let dev = Device::Cpu;
        let g = StructureCode::from_rows(&vec![vec![0.0; 3]; 2], &dev).unwrap();
        let h = AppearanceCode::from_rows(&vec![vec![1.0; 4]; 2], &dev).unwrap();
        assert!(matches!(merge_code(&g, &h), Err(Error::Shape { .. })));
        assert!(matches!(compose_swap_code(&g, &h), Err(Error::Shape { .. })));
    }

    #[test]
    fn transfer_direction_examples() {
        let dev = Device::Cpu;
        let g = StructureCode::from_rows(&[vec![1.0, 2.0]], &dev).unwrap();
        let n = TransferDirection::from_rows(&[vec![0.5, -1.0]], &dev).unwrap();
        let out = apply_transfer_direction(&g, &n).unwrap();
        assert_eq!(out.to_rows().unwrap(), vec![vec![1.5, 1.0]]);

        let zero = TransferDirection::new(g.tensor().zeros_like().unwrap()).unwrap();
        let same = apply_transfer_direction(&g, &zero).unwrap();
        assert_eq!(bits(same.tensor()), bits(g.tensor()));

        let neg = TransferDirection::new(g.tensor().neg().unwrap()).unwrap();
        let z = apply_transfer_direction(&g, &neg).unwrap();
        assert!(z.to_rows().unwrap().iter().flatten().all(|&v| v == 0.0));

        let bad = TransferDirection::from_rows(&[vec![0.5, -1.0, 2.0]], &dev).unwrap();
        assert!(apply_transfer_direction(&g, &bad).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let r = LatentCode::from_rows(&[vec![1.0], vec![f64::NAN]], 1, &Device::Cpu);
        assert!(r.is_err());
    }

    #[test]
    fn no_op_swap_reproduces_source() {
        let w = numbered(10, 4);
        let (g, h) = split_code(&w).unwrap();
        let zero = TransferDirection::new(g.tensor().zeros_like().unwrap()).unwrap();
        let g_hat = apply_transfer_direction(&g, &zero).unwrap();
        let back = compose_swap_code(&g_hat, &h).unwrap();
        assert_eq!(bits(back.tensor()), bits(w.tensor()));
    }

    #[test]
    fn swap_ignores_source_appearance() {
        let dev = Device::Cpu;
        let ws = numbered(10, 3);
        let wt = LatentCode::new((numbered(10, 3).tensor() * 3.0).unwrap(), 4).unwrap();
        let (gs, hs) = split_code(&ws).unwrap();
        let (_, ht) = split_code(&wt).unwrap();
        let n = TransferDirection::from_rows(&vec![vec![0.25; 3]; 4], &dev).unwrap();
        let a = compose_swap_code(&apply_transfer_direction(&gs, &n).unwrap(), &ht).unwrap();
        // perturbing h_s cannot influence anything downstream
        let _hs_perturbed = AppearanceCode::new((hs.tensor() + 100.0).unwrap()).unwrap();
        let b = compose_swap_code(&apply_transfer_direction(&gs, &n).unwrap(), &ht).unwrap();
        assert_eq!(bits(a.tensor()), bits(b.tensor()));
        let (_, a_h) = split_code(&a).unwrap();
        assert_eq!(bits(a_h.tensor()), bits(ht.tensor()));
    }

    #[test]
    fn batched_codes_split_on_row_axis() {
        let t = Tensor::arange(0f64, 2.0 * 10.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 10, 3))
            .unwrap();
        let w = LatentCode::new(t.clone(), 4).unwrap();
        let (g, h) = split_code(&w).unwrap();
        assert_eq!(g.tensor().dims(), &[2, 4, 3]);
        assert_eq!(h.tensor().dims(), &[2, 6, 3]);
        let back = merge_code(&g, &h).unwrap();
        assert_eq!(bits(back.tensor()), bits(&t));
    }

    proptest! {
        #[test]
        fn split_merge_round_trip(l in 2usize..20, d in 1usize..6, seed in any::<u64>()) {
            let mut x = seed;
            let rows: Vec<Vec<f64>> = (0..l).map(|_| (0..d).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 20.0 - 10.0
            }).collect()).collect();
            let k = structure_split_index(l).unwrap();
            let w = LatentCode::from_rows(&rows, k, &Device::Cpu).unwrap();
            let (g, h) = split_code(&w).unwrap();
            let back = merge_code(&g, &h).unwrap();
            prop_assert_eq!(bits(back.tensor()), bits(w.tensor()));
            prop_assert_eq!(back.split_index(), k);
        }

        #[test]
        fn split_index_monotone_and_bounded(l in 2usize..200) {
            let k = structure_split_index(l).unwrap();
            prop_assert!(k >= 1 && k <= l - 1);
            prop_assert!(structure_split_index(l + 1).unwrap() >= k);
        }

        #[test]
        fn transfer_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s in any::<u64>()) {
            let dev = Device::Cpu;
            let mut x = s;
            let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); ((x >> 11) as f64 / (1u64 << 53) as f64) - 0.5 };
            let g: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| next()).collect()).collect();
            let n1: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| next()).collect()).collect();
            let n2: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| next()).collect()).collect();
            let combo: Vec<Vec<f64>> = (0..3).map(|i| (0..4).map(|j| a * n1[i][j] + b * n2[i][j]).collect()).collect();
            let gs = StructureCode::from_rows(&g, &dev).unwrap();
            let out = apply_transfer_direction(&gs, &TransferDirection::from_rows(&combo, &dev).unwrap()).unwrap();
            let rows = out.to_rows().unwrap();
            for i in 0..3 { for j in 0..4 {
                prop_assert!((rows[i][j] - (g[i][j] + a * n1[i][j] + b * n2[i][j])).abs() <= 1e-12);
            }}
        }
    }
}
