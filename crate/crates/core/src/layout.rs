//! Image ↔ token-sequence geometry: patches, clusters and prediction orders.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Order in which clusters are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OrderKind {
    #[default]
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
    Random(u64),
}

impl OrderKind {
    pub const FIXED: [OrderKind; 4] = [
        OrderKind::RowForward,
        OrderKind::RowBackward,
        OrderKind::ColForward,
        OrderKind::ColBackward,
    ];
}

impl fmt::Display for OrderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderKind::RowForward => f.write_str("row-forward"),
            OrderKind::RowBackward => f.write_str("row-backward"),
            OrderKind::ColForward => f.write_str("col-forward"),
            OrderKind::ColBackward => f.write_str("col-backward"),
            OrderKind::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for OrderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match s.as_str() {
            "row-forward" => OrderKind::RowForward,
            "row-backward" => OrderKind::RowBackward,
            "col-forward" => OrderKind::ColForward,
            "col-backward" => OrderKind::ColBackward,
            "random" => OrderKind::Random(0),
            other => match other.strip_prefix("random:") {
                Some(seed) => OrderKind::Random(
                    seed.parse()
                        .map_err(|_| Error::Config(format!("bad random order seed {seed:?}")))?,
                ),
                None => {
                    return Err(Error::Config(format!(
                        "unknown order {other:?} (row-forward, row-backward, col-forward, col-backward, random:SEED)"
                    )))
                }
            },
        })
    }
}

impl Serialize for OrderKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OrderKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Visiting order over a `rows × cols` raster grid: `perm[i]` is the raster
/// index visited at step `i`.
pub fn order_permutation(rows: usize, cols: usize, order: OrderKind) -> Vec<usize> {
    let n = rows * cols;
    match order {
        OrderKind::RowForward => (0..n).collect(),
        OrderKind::RowBackward => (0..rows).flat_map(|r| (0..cols).rev().map(move |c| r * cols + c)).collect(),
        OrderKind::ColForward => (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect(),
        OrderKind::ColBackward => (0..cols).flat_map(|c| (0..rows).rev().map(move |r| r * cols + c)).collect(),
        OrderKind::Random(seed) => {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        }
    }
}

/// Inverse permutation; `None` if `perm` is not a bijection on `0..len`.
pub fn invert_permutation(perm: &[usize]) -> Option<Vec<usize>> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        if p >= perm.len() || inv[p] != usize::MAX {
            return None;
        }
        inv[p] = i;
    }
    Some(inv)
}

/// Deterministic seed for one (run, epoch, image) draw of a random order.
pub fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Patch/cluster geometry of one image size plus the cluster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLayout {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub cluster: usize,
    pub order: OrderKind,
    /// `perm[i]` = raster index of the `i`-th visited cluster
    pub perm: Vec<usize>,
}

pub fn make_layout(height: usize, width: usize, patch: usize, cluster: usize, order: OrderKind) -> Result<ClusterLayout> {
    if patch == 0 || cluster == 0 || height == 0 || width == 0 {
        return Err(Error::Config("image, patch and cluster sizes must be positive".into()));
    }
    if cluster % patch != 0 {
        return Err(Error::Config(format!(
            "cluster size {cluster} is not a multiple of patch size {patch}"
        )));
    }
    if height % cluster != 0 {
        return Err(Error::Config(format!(
            "image height {height} is not divisible by cluster size {cluster}"
        )));
    }
    if width % cluster != 0 {
        return Err(Error::Config(format!(
            "image width {width} is not divisible by cluster size {cluster}"
        )));
    }
    let perm = order_permutation(height / cluster, width / cluster, order);
    Ok(ClusterLayout {
        height,
        width,
        patch,
        cluster,
        order,
        perm,
    })
}

impl ClusterLayout {
    /// Cluster grid `(rows, cols)`.
    pub fn cluster_grid(&self) -> (usize, usize) {
        (self.height / self.cluster, self.width / self.cluster)
    }

    /// Patch grid `(rows, cols)`.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_clusters(&self) -> usize {
        self.perm.len()
    }

    /// Patches per cluster, `k = (s/p)²`.
    pub fn patches_per_cluster(&self) -> usize {
        let q = self.cluster / self.patch;
        q * q
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.patch_grid();
        r * c
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Same geometry, different order.
    pub fn with_order(&self, order: OrderKind) -> Self {
        let (r, c) = self.cluster_grid();
        Self {
            order,
            perm: order_permutation(r, c, order),
            ..self.clone()
        }
    }

    /// Raster patch index of every sequence position.
    pub fn token_positions(&self) -> Vec<usize> {
        let q = self.cluster / self.patch;
        let (_, ccols) = self.cluster_grid();
        let (_, pcols) = self.patch_grid();
        let mut out = Vec::with_capacity(self.num_patches());
        for &c in &self.perm {
            let (cr, cc) = (c / ccols, c % ccols);
            for i in 0..q {
                for j in 0..q {
                    out.push((cr * q + i) * pcols + cc * q + j);
                }
            }
        }
        out
    }

    /// Sequence position → visited-cluster index (`t / k`).
    pub fn cluster_of_token(&self, t: usize) -> usize {
        t / self.patches_per_cluster()
    }
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` values, HWC
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Quantizes back to bytes (clamped, rounded).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Flattens `img` into `[L, p²·3]` tokens in layout order.
pub fn patchify(img: &Image, layout: &ClusterLayout) -> Result<Tensor<f32>> {
    let mut out = vec![0.0f32; layout.num_patches() * layout.token_dim()];
    patchify_into(img, layout, &layout.token_positions(), &mut out)?;
    Tensor::new(vec![layout.num_patches(), layout.token_dim()], out)
}

/// [`patchify`] writing into `out`, with precomputed token positions.
pub fn patchify_into(img: &Image, layout: &ClusterLayout, positions: &[usize], out: &mut [f32]) -> Result<()> {
    if img.height != layout.height || img.width != layout.width {
        return Err(Error::Input(format!(
            "image is {}x{}, layout expects {}x{}",
            img.height, img.width, layout.height, layout.width
        )));
    }
    let p = layout.patch;
    let (_, pcols) = layout.patch_grid();
    let dim = layout.token_dim();
    for (t, &pos) in positions.iter().enumerate() {
        let (pr, pc) = (pos / pcols, pos % pcols);
        let tok = &mut out[t * dim..(t + 1) * dim];
        for i in 0..p {
            let src = ((pr * p + i) * img.width + pc * p) * 3;
            tok[i * p * 3..(i + 1) * p * 3].copy_from_slice(&img.data[src..src + p * 3]);
        }
    }
    Ok(())
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor<f32>, layout: &ClusterLayout) -> Result<Image> {
    let dim = layout.token_dim();
    if tokens.shape() != [layout.num_patches(), dim] {
        return Err(Error::Input(format!(
            "tokens {:?} do not match layout ({} x {dim})",
            tokens.shape(),
            layout.num_patches()
        )));
    }
    let p = layout.patch;
    let (_, pcols) = layout.patch_grid();
    let mut data = vec![0.0f32; layout.height * layout.width * 3];
    for (t, pos) in layout.token_positions().into_iter().enumerate() {
        let (pr, pc) = (pos / pcols, pos % pcols);
        let tok = &tokens.data()[t * dim..(t + 1) * dim];
        for i in 0..p {
            let dst = ((pr * p + i) * layout.width + pc * p) * 3;
            data[dst..dst + p * 3].copy_from_slice(&tok[i * p * 3..(i + 1) * p * 3]);
        }
    }
    Image::new(layout.height, layout.width, data)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn table_rows() {
        for (s, n) in [(96, 4), (64, 9), (48, 16), (32, 36), (16, 144)] {
            let l = make_layout(192, 192, 16, s, OrderKind::RowForward).unwrap();
            assert_eq!(l.num_clusters(), n);
            assert_eq!(l.patches_per_cluster() * l.num_clusters(), l.num_patches());
        }
    }

    #[test]
    fn three_by_three_orders() {
        let p = |o| order_permutation(3, 3, o);
        assert_eq!(p(OrderKind::RowForward), (0..9).collect::<Vec<_>>());
        assert_eq!(p(OrderKind::RowBackward), [2, 1, 0, 5, 4, 3, 8, 7, 6]);
        assert_eq!(p(OrderKind::ColForward), [0, 3, 6, 1, 4, 7, 2, 5, 8]);
        assert_eq!(p(OrderKind::ColBackward), [6, 3, 0, 7, 4, 1, 8, 5, 2]);
        assert_ne!(p(OrderKind::Random(1)), p(OrderKind::Random(2)));
        assert_eq!(p(OrderKind::Random(1)), p(OrderKind::Random(1)));
    }

    #[test]
    fn divisibility_errors_name_the_dimension() {
        let e = make_layout(192, 192, 16, 50, OrderKind::RowForward).unwrap_err().to_string();
        assert!(e.contains("patch size"), "{e}");
        let e = make_layout(200, 192, 8, 16, OrderKind::RowForward).unwrap_err().to_string();
        assert!(e.contains("height"), "{e}");
        let e = make_layout(192, 200, 8, 16, OrderKind::RowForward).unwrap_err().to_string();
        assert!(e.contains("width"), "{e}");
    }

    #[test]
    fn order_strings_round_trip() {
        for o in [
            OrderKind::RowForward,
            OrderKind::RowBackward,
            OrderKind::ColForward,
            OrderKind::ColBackward,
            OrderKind::Random(42),
        ] {
            assert_eq!(o.to_string().parse::<OrderKind>().unwrap(), o);
            let j = serde_json::to_string(&o).unwrap();
            assert_eq!(serde_json::from_str::<OrderKind>(&j).unwrap(), o);
        }
        assert!("diagonal".parse::<OrderKind>().is_err());
    }

    #[test]
    fn degenerate_cluster_is_raster_order() {
        let l = make_layout(32, 48, 8, 8, OrderKind::RowForward).unwrap();
        assert_eq!(l.token_positions(), (0..l.num_patches()).collect::<Vec<_>>());
        let img = random_image(0, 32, 48);
        let t = patchify(&img, &l).unwrap();
        // token 7 is patch row 1, col 1 (6 patches per row)
        assert_eq!(t.data()[7 * 192], img.data[(8 * 48 + 8) * 3]);
    }

    #[test]
    fn painted_cluster_index_is_recovered() {
        let l = make_layout(64, 96, 8, 32, OrderKind::ColBackward).unwrap();
        let (_, ccols) = l.cluster_grid();
        let mut data = vec![0.0f32; 64 * 96 * 3];
        for y in 0..64 {
            for x in 0..96 {
                let c = (y / 32) * ccols + x / 32;
                data[(y * 96 + x) * 3..(y * 96 + x + 1) * 3].fill(c as f32);
            }
        }
        let t = patchify(&Image::new(64, 96, data).unwrap(), &l).unwrap();
        let k = l.patches_per_cluster();
        for tok in 0..l.num_patches() {
            let row = &t.data()[tok * l.token_dim()..(tok + 1) * l.token_dim()];
            let want = l.perm[tok / k] as f32;
            assert!(row.iter().all(|&v| v == want));
        }
    }

    #[test]
    fn single_token_lands_in_one_patch() {
        let l = make_layout(32, 32, 4, 16, OrderKind::RowBackward).unwrap();
        let mut t = Tensor::<f32>::zeros([l.num_patches(), l.token_dim()]);
        let tok = 21;
        t.data_mut()[tok * l.token_dim()..(tok + 1) * l.token_dim()].fill(1.0);
        let img = unpatchify(&t, &l).unwrap();
        let pos = l.token_positions()[tok];
        let (pr, pc) = (pos / 8, pos % 8);
        for y in 0..32 {
            for x in 0..32 {
                let inside = y / 4 == pr && x / 4 == pc;
                assert_eq!(img.data[(y * 32 + x) * 3] == 1.0, inside);
            }
        }
    }

    #[test]
    fn mismatched_inputs() {
        let l = make_layout(32, 32, 4, 16, OrderKind::RowForward).unwrap();
        assert!(matches!(patchify(&random_image(0, 16, 32), &l), Err(Error::Input(_))));
        assert!(matches!(unpatchify(&Tensor::zeros([3, 48]), &l), Err(Error::Input(_))));
    }

    #[test]
    fn clusters_are_contiguous() {
        let l = make_layout(48, 48, 4, 12, OrderKind::Random(9)).unwrap();
        let q = 3;
        let pos = l.token_positions();
        for c in 0..l.num_clusters() {
            let chunk = &pos[c * 9..(c + 1) * 9];
            let rows: Vec<usize> = chunk.iter().map(|p| p / 12 / q).collect();
            let cols: Vec<usize> = chunk.iter().map(|p| p % 12 / q).collect();
            assert!(rows.iter().all(|&r| r == rows[0]) && cols.iter().all(|&c| c == cols[0]));
        }
    }

    #[test]
    fn pixel_units_need_no_special_case() {
        let l = make_layout(4, 4, 1, 1, OrderKind::RowForward).unwrap();
        assert_eq!(l.num_clusters(), 16);
        assert_eq!(l.token_dim(), 3);
        let img = random_image(3, 4, 4);
        assert_eq!(patchify(&img, &l).unwrap().data(), img.data.as_slice());
    }

    proptest! {
        #[test]
        fn permutations_are_bijections(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
            for o in OrderKind::FIXED.into_iter().chain([OrderKind::Random(seed)]) {
                let p = order_permutation(rows, cols, o);
                let inv = invert_permutation(&p).expect("bijection");
                for i in 0..p.len() {
                    prop_assert_eq!(inv[p[i]], i);
                    prop_assert_eq!(p[inv[i]], i);
                }
            }
        }

        #[test]
        fn round_trip_is_identity(seed in any::<u64>(), q in 1usize..4, g in 1usize..4) {
            let (p, s) = (2, 2 * q);
            let h = s * g;
            let img = random_image(seed, h, h + s);
            let l = make_layout(h, h + s, p, s, OrderKind::Random(seed)).unwrap();
            let back = unpatchify(&patchify(&img, &l).unwrap(), &l).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
