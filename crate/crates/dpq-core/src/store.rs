//! Descriptor sets and scene point sets: in-memory containers, synthetic
//! data generators, and the `.dsc` / `.scn` binary formats.
//!
//! On disk everything is little-endian with f32 payloads; in memory values
//! are f64. Saving truncates, loading widens, so save ∘ load ∘ save is
//! byte-stable.

use crate::binfmt::{Reader, Writer};
use crate::error::{DpqError, Result};
use crate::numerics::{derive_seed, Matrix, Rng};

const DSC_MAGIC: &[u8; 4] = b"DPQD";
const DSC_VERSION: u32 = 1;
const SCN_MAGIC: &[u8; 4] = b"DPQS";
const SCN_VERSION: u32 = 1;

/// Tolerance for the unit-norm check on sets that claim L2 normalization.
/// Wide enough to survive the f32 file representation.
const NORM_TOL: f64 = 1e-4;

/// A database of fixed-width descriptors with per-row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    data: Matrix,
    ids: Vec<u64>,
    l2_normalized: bool,
    /// Optional per-row group labels (e.g. synthetic cluster index). Not
    /// serialized; used by losses that want group-aware negative mining.
    groups: Option<Vec<u32>>,
}

impl DescriptorSet {
    pub fn new(data: Matrix, ids: Vec<u64>, l2_normalized: bool) -> Result<DescriptorSet> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(DpqError::Input(format!(
                "descriptor set must be non-empty, got {}x{}",
                data.rows(),
                data.cols()
            )));
        }
        if ids.len() != data.rows() {
            return Err(DpqError::Dimension(format!(
                "{} ids for {} rows",
                ids.len(),
                data.rows()
            )));
        }
        if !data.all_finite() {
            return Err(DpqError::Numeric("descriptor set has non-finite values".into()));
        }
        if l2_normalized {
            for i in 0..data.rows() {
                let norm = crate::numerics::dot(data.row(i), data.row(i)).sqrt();
                if (norm - 1.0).abs() > NORM_TOL {
                    return Err(DpqError::Numeric(format!(
                        "row {i} claims L2 normalization but has norm {norm}"
                    )));
                }
            }
        }
        Ok(DescriptorSet {
            data,
            ids,
            l2_normalized,
            groups: None,
        })
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    pub fn groups(&self) -> Option<&[u32]> {
        self.groups.as_deref()
    }

    pub fn with_groups(mut self, groups: Vec<u32>) -> Result<DescriptorSet> {
        if groups.len() != self.n() {
            return Err(DpqError::Dimension(format!(
                "{} group labels for {} rows",
                groups.len(),
                self.n()
            )));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    /// Subset of rows in the given order. Ids and groups follow.
    pub fn select(&self, idx: &[usize]) -> Result<DescriptorSet> {
        let data = self.data.select_rows(idx)?;
        let ids = idx.iter().map(|&i| self.ids[i]).collect();
        let groups = self
            .groups
            .as_ref()
            .map(|g| idx.iter().map(|&i| g[i]).collect());
        Ok(DescriptorSet {
            data,
            ids,
            l2_normalized: self.l2_normalized,
            groups,
        })
    }

    /// Return a copy with unit-norm rows and the flag set.
    pub fn l2_normalize(&self) -> Result<DescriptorSet> {
        let mut data = self.data.clone();
        for i in 0..data.rows() {
            let norm = crate::numerics::dot(data.row(i), data.row(i)).sqrt();
            if norm == 0.0 {
                return Err(DpqError::Numeric(format!(
                    "cannot L2-normalize zero row {i}"
                )));
            }
            for v in data.row_mut(i) {
                *v /= norm;
            }
        }
        Ok(DescriptorSet {
            data,
            ids: self.ids.clone(),
            l2_normalized: true,
            groups: self.groups.clone(),
        })
    }

    /// Serialize to the `.dsc` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(DSC_MAGIC)
            .u32(DSC_VERSION)
            .u32(self.dim() as u32)
            .u64(self.n() as u64)
            .u8(self.l2_normalized as u8)
            .f32_slice(self.data.data());
        for &id in &self.ids {
            w.u64(id);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DescriptorSet> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DSC_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != DSC_VERSION {
            return Err(DpqError::Format {
                offset: 4,
                what: format!("unsupported descriptor version {version}"),
            });
        }
        let dim = r.read_u32("dim")? as usize;
        let n = r.read_u64("count")? as usize;
        let norm_flag = r.read_u8("l2_normalized flag")?;
        if norm_flag > 1 {
            return Err(DpqError::Format {
                offset: r.position() - 1,
                what: format!("l2_normalized flag must be 0 or 1, got {norm_flag}"),
            });
        }
        if dim == 0 || n == 0 {
            return Err(DpqError::Format {
                offset: 8,
                what: format!("empty descriptor set ({n} rows, dim {dim})"),
            });
        }
        let values = r.read_f32_vec(n * dim, "descriptor payload")?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.read_u64("ids")?);
        }
        r.expect_end()?;
        let data = Matrix::new(n, dim, values)?;
        DescriptorSet::new(data, ids, norm_flag == 1)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<DescriptorSet> {
        DescriptorSet::from_bytes(&std::fs::read(path)?)
    }
}

/// 3D map points with a per-point distinctiveness score in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointSet {
    positions: Matrix, // m x 3
    distinctiveness: Vec<f64>,
    total_images: u64,
}

impl ScenePointSet {
    pub fn new(
        positions: Matrix,
        distinctiveness: Vec<f64>,
        total_images: u64,
    ) -> Result<ScenePointSet> {
        if positions.rows() == 0 {
            return Err(DpqError::Input("scene must have at least one point".into()));
        }
        if positions.cols() != 3 {
            return Err(DpqError::Dimension(format!(
                "scene positions must be m x 3, got m x {}",
                positions.cols()
            )));
        }
        if distinctiveness.len() != positions.rows() {
            return Err(DpqError::Dimension(format!(
                "{} distinctiveness scores for {} points",
                distinctiveness.len(),
                positions.rows()
            )));
        }
        if !positions.all_finite() {
            return Err(DpqError::Numeric("scene positions have non-finite values".into()));
        }
        for (i, &d) in distinctiveness.iter().enumerate() {
            if !(0.0..=1.0).contains(&d) {
                return Err(DpqError::Numeric(format!(
                    "distinctiveness[{i}] = {d} outside [0, 1]"
                )));
            }
        }
        Ok(ScenePointSet {
            positions,
            distinctiveness,
            total_images,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.rows() == 0
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn distinctiveness(&self) -> &[f64] {
        &self.distinctiveness
    }

    pub fn total_images(&self) -> u64 {
        self.total_images
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(SCN_MAGIC)
            .u32(SCN_VERSION)
            .u64(self.len() as u64)
            .u64(self.total_images)
            .f32_slice(self.positions.data())
            .f32_slice(&self.distinctiveness);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ScenePointSet> {
        let mut r = Reader::new(bytes);
        r.expect_magic(SCN_MAGIC)?;
        let version = r.read_u32("version")?;
        if version != SCN_VERSION {
            return Err(DpqError::Format {
                offset: 4,
                what: format!("unsupported scene version {version}"),
            });
        }
        let m = r.read_u64("point count")? as usize;
        let total_images = r.read_u64("total images")?;
        if m == 0 {
            return Err(DpqError::Format {
                offset: 8,
                what: "scene has zero points".into(),
            });
        }
        let pos = r.read_f32_vec(m * 3, "positions")?;
        let dist = r.read_f32_vec(m, "distinctiveness")?;
        r.expect_end()?;
        ScenePointSet::new(Matrix::new(m, 3, pos)?, dist, total_images)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<ScenePointSet> {
        ScenePointSet::from_bytes(&std::fs::read(path)?)
    }
}

/// Uniform direction on the unit sphere in `dim` dimensions.
fn unit_sphere(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = crate::numerics::dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Clustered synthetic descriptors: `n_clusters` centers uniform on the unit
/// sphere, `per_cluster` members each at center + N(0, spread² I), all rows
/// L2-normalized. Group labels carry the cluster index; ids are sequential.
pub fn synth_descriptors(
    n_clusters: usize,
    per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<DescriptorSet> {
    if n_clusters == 0 || per_cluster == 0 || dim == 0 {
        return Err(DpqError::Config(format!(
            "synthetic descriptors need positive counts, got {n_clusters} clusters x {per_cluster}, dim {dim}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(DpqError::Config(format!("spread must be >= 0, got {spread}")));
    }
    let mut center_rng = Rng::seeded(derive_seed(seed, "synth.centers"));
    let mut member_rng = Rng::seeded(derive_seed(seed, "synth.members"));
    let n = n_clusters * per_cluster;
    let mut data = Vec::with_capacity(n * dim);
    let mut groups = Vec::with_capacity(n);
    for c in 0..n_clusters {
        let center = unit_sphere(&mut center_rng, dim);
        for _ in 0..per_cluster {
            let mut row: Vec<f64> = center
                .iter()
                .map(|&x| x + spread * member_rng.normal())
                .collect();
            let norm = crate::numerics::dot(&row, &row).sqrt();
            // spread >= 0 and unit centers keep norms well away from zero.
            for v in &mut row {
                *v /= norm;
            }
            data.extend_from_slice(&row);
            groups.push(c as u32);
        }
    }
    let ids = (0..n as u64).collect();
    DescriptorSet::new(Matrix::new(n, dim, data)?, ids, true)?.with_groups(groups)
}

/// Clustered synthetic 3D scene: well-separated cluster centers, tight
/// member spread, uniform distinctiveness scores.
pub fn synth_scene(m: usize, n_clusters: usize, seed: u64) -> Result<ScenePointSet> {
    if m == 0 || n_clusters == 0 || n_clusters > m {
        return Err(DpqError::Config(format!(
            "scene needs 1 <= clusters <= points, got {n_clusters} clusters, {m} points"
        )));
    }
    let mut rng = Rng::seeded(derive_seed(seed, "synth.scene"));
    // Centers on a radius-10 sphere, re-drawn until pairwise separation is
    // comfortable; members at sigma 0.5 around them.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    while centers.len() < n_clusters {
        let cand: Vec<f64> = unit_sphere(&mut rng, 3).iter().map(|x| 10.0 * x).collect();
        if centers
            .iter()
            .all(|c| crate::numerics::squared_dist(c, &cand) > 36.0)
        {
            centers.push(cand);
        }
    }
    let mut pos = Vec::with_capacity(m * 3);
    for i in 0..m {
        let c = &centers[i % n_clusters];
        for &x in c {
            pos.push(x + 0.5 * rng.normal());
        }
    }
    let dist: Vec<f64> = (0..m).map(|_| rng.f64()).collect();
    ScenePointSet::new(Matrix::new(m, 3, pos)?, dist, 100)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set() -> DescriptorSet {
        let data = Matrix::new(3, 2, vec![0.5, 0.25, -1.0, 2.0, 0.125, -0.75]).unwrap();
        DescriptorSet::new(data, vec![10, 20, 30], false).unwrap()
    }

    #[test]
    fn dsc_roundtrip_is_identity_on_32bit_values() {
        let set = small_set();
        let bytes = set.to_bytes();
        let back = DescriptorSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.n(), 3);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.ids(), &[10, 20, 30]);
        assert!(!back.l2_normalized());
        // Values above are exactly representable in f32, so identity holds.
        assert_eq!(back.data().data(), set.data().data());
        // Second serialization is byte-identical.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn dsc_save_load_save_is_byte_stable_for_rounded_values() {
        // 0.1 rounds through f32; after one save/load the representation is
        // fixed, so a second save matches the first byte for byte.
        let data = Matrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let set = DescriptorSet::new(data, vec![0], false).unwrap();
        let first = set.to_bytes();
        let reloaded = DescriptorSet::from_bytes(&first).unwrap();
        assert_eq!(reloaded.to_bytes(), first);
    }

    #[test]
    fn dsc_bad_magic_is_format_error_at_offset_zero() {
        let mut bytes = small_set().to_bytes();
        bytes[0] = b'X';
        match DescriptorSet::from_bytes(&bytes) {
            Err(DpqError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("want format error, got {other:?}"),
        }
    }

    #[test]
    fn dsc_truncation_is_format_error_with_offset() {
        let bytes = small_set().to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        match DescriptorSet::from_bytes(cut) {
            Err(DpqError::Format { offset, .. }) => {
                assert!(offset > 0, "offset {offset}");
            }
            other => panic!("want format error, got {other:?}"),
        }
    }

    #[test]
    fn dsc_trailing_garbage_rejected() {
        let mut bytes = small_set().to_bytes();
        bytes.push(0);
        assert!(matches!(
            DescriptorSet::from_bytes(&bytes),
            Err(DpqError::Format { .. })
        ));
    }

    #[test]
    fn empty_set_rejected() {
        assert!(matches!(
            DescriptorSet::new(Matrix::zeros(0, 4), vec![], false),
            Err(DpqError::Input(_))
        ));
    }

    #[test]
    fn norm_flag_is_validated() {
        let data = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert!(matches!(
            DescriptorSet::new(data, vec![0], true),
            Err(DpqError::Numeric(_))
        ));
    }

    #[test]
    fn l2_normalize_produces_unit_rows() {
        let set = small_set().l2_normalize().unwrap();
        assert!(set.l2_normalized());
        for i in 0..set.n() {
            let r = set.data().row(i);
            let norm = crate::numerics::dot(r, r).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let data = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let set = DescriptorSet::new(data, vec![0, 1], false).unwrap();
        assert!(matches!(set.l2_normalize(), Err(DpqError::Numeric(_))));
    }

    #[test]
    fn synth_rows_are_unit_norm_and_grouped() {
        let set = synth_descriptors(4, 5, 16, 0.1, 7).unwrap();
        assert_eq!(set.n(), 20);
        assert_eq!(set.dim(), 16);
        assert!(set.l2_normalized());
        let groups = set.groups().unwrap();
        assert_eq!(groups.len(), 20);
        assert_eq!(groups[0], 0);
        assert_eq!(groups[19], 3);
        assert_eq!(set.ids()[19], 19);
    }

    #[test]
    fn synth_zero_spread_collapses_clusters() {
        let set = synth_descriptors(3, 4, 8, 0.0, 11).unwrap();
        for c in 0..3 {
            let base = set.data().row(c * 4);
            for j in 1..4 {
                assert_eq!(set.data().row(c * 4 + j), base);
            }
        }
    }

    #[test]
    fn synth_members_stay_near_their_center() {
        let set = synth_descriptors(8, 10, 32, 0.05, 3).unwrap();
        let groups = set.groups().unwrap().to_vec();
        // Cluster means as proxies for centers.
        let mut means = vec![vec![0.0; 32]; 8];
        for i in 0..set.n() {
            for (a, b) in means[groups[i] as usize].iter_mut().zip(set.data().row(i)) {
                *a += b / 10.0;
            }
        }
        for i in 0..set.n() {
            let own = crate::numerics::squared_dist(set.data().row(i), &means[groups[i] as usize]);
            for (c, mean) in means.iter().enumerate() {
                if c != groups[i] as usize {
                    let other = crate::numerics::squared_dist(set.data().row(i), mean);
                    assert!(own < other, "row {i}: own {own} vs cluster {c} {other}");
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_descriptors(3, 3, 8, 0.1, 42).unwrap();
        let b = synth_descriptors(3, 3, 8, 0.1, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_descriptors(3, 3, 8, 0.1, 43).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn scn_roundtrip() {
        let scene = synth_scene(50, 4, 9).unwrap();
        let bytes = scene.to_bytes();
        let back = ScenePointSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 50);
        assert_eq!(back.total_images(), 100);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn scn_bad_magic_and_truncation() {
        let scene = synth_scene(10, 2, 1).unwrap();
        let mut bytes = scene.to_bytes();
        bytes[1] = b'?';
        assert!(matches!(
            ScenePointSet::from_bytes(&bytes),
            Err(DpqError::Format { offset: 0, .. })
        ));
        let good = scene.to_bytes();
        assert!(matches!(
            ScenePointSet::from_bytes(&good[..good.len() - 2]),
            Err(DpqError::Format { .. })
        ));
    }

    #[test]
    fn scene_distinctiveness_in_unit_interval() {
        let scene = synth_scene(200, 4, 5).unwrap();
        for &d in scene.distinctiveness() {
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn scene_validation() {
        assert!(synth_scene(0, 1, 0).is_err());
        assert!(synth_scene(3, 5, 0).is_err());
        let pos = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            ScenePointSet::new(pos.clone(), vec![0.5, 1.5], 10),
            Err(DpqError::Numeric(_))
        ));
        assert!(matches!(
            ScenePointSet::new(pos, vec![0.5], 10),
            Err(DpqError::Dimension(_))
        ));
    }

    #[test]
    fn select_preserves_ids_and_groups() {
        let set = synth_descriptors(2, 3, 4, 0.1, 1).unwrap();
        let sub = set.select(&[4, 0]).unwrap();
        assert_eq!(sub.ids(), &[4, 0]);
        assert_eq!(sub.groups().unwrap(), &[1, 0]);
        assert_eq!(sub.data().row(0), set.data().row(4));
    }
}
