//! The five generative-model variants, their prior hyperparameters, and the
//! episode-level posterior state they induce.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{FullGaussian, MatrixNormal, OneHotCategorical};
use crate::error::{Error, Result};

/// Which latent-space structure the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Continuous Gaussian addressing weights, unit code noise by default.
    #[serde(rename = "gaussian")]
    GaussianAddress,
    /// One-hot categorical addressing (row lookup).
    #[serde(rename = "categorical")]
    CategoricalAddress,
    /// Gaussian addressing plus a learned location (bias) vector.
    #[serde(rename = "mean-shifted")]
    MeanShifted,
    /// H clusters, each with its own memory matrix and location.
    #[serde(rename = "mixture")]
    Mixture,
    /// G independent mixture blocks over consecutive code partitions.
    #[serde(rename = "tree")]
    Tree,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::GaussianAddress => "gaussian",
            Variant::CategoricalAddress => "categorical",
            Variant::MeanShifted => "mean-shifted",
            Variant::Mixture => "mixture",
            Variant::Tree => "tree",
        }
    }

    /// Whether the variant carries per-cluster location vectors.
    pub fn has_location(&self) -> bool {
        matches!(self, Variant::MeanShifted | Variant::Mixture | Variant::Tree)
    }

    /// Whether the variant carries discrete cluster assignments.
    pub fn has_assignments(&self) -> bool {
        matches!(self, Variant::Mixture | Variant::Tree)
    }
}

/// One generative-model variant with all prior hyperparameters.
///
/// `prior_mean` is K x (C/G) and shared across clusters and partitions;
/// `prior_row_cov` is K x K. Location priors are (C/G)-dimensional and fixed
/// to the standard normal for the tree variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    variant: Variant,
    memory_rows: usize,
    code_dim: usize,
    clusters: usize,
    partitions: usize,
    sigma_z2: f64,
    prior_mean: DMatrix<f64>,
    prior_row_cov: DMatrix<f64>,
    loc_prior_mean: Option<DVector<f64>>,
    loc_prior_cov: Option<DMatrix<f64>>,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        variant: Variant,
        memory_rows: usize,
        code_dim: usize,
        clusters: usize,
        partitions: usize,
        sigma_z2: f64,
        prior_mean: DMatrix<f64>,
        prior_row_cov: DMatrix<f64>,
        loc_prior_mean: Option<DVector<f64>>,
        loc_prior_cov: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if memory_rows == 0 || code_dim == 0 || clusters == 0 || partitions == 0 {
            return Err(Error::invalid("ModelSpec: K, C, H, G must all be >= 1"));
        }
        if sigma_z2 <= 0.0 || !sigma_z2.is_finite() {
            return Err(Error::invalid("ModelSpec: sigma_z2 must be positive and finite"));
        }
        if !code_dim.is_multiple_of(partitions) {
            return Err(Error::invalid(format!(
                "ModelSpec: G = {partitions} must divide C = {code_dim}"
            )));
        }
        match variant {
            Variant::GaussianAddress | Variant::CategoricalAddress | Variant::MeanShifted => {
                if clusters != 1 {
                    return Err(Error::invalid(format!(
                        "ModelSpec: {} has a single cluster, got H = {clusters}",
                        variant.as_str()
                    )));
                }
                if partitions != 1 {
                    return Err(Error::invalid(format!(
                        "ModelSpec: {} has a single partition, got G = {partitions}",
                        variant.as_str()
                    )));
                }
            }
            Variant::Mixture => {
                if partitions != 1 {
                    return Err(Error::invalid(format!(
                        "ModelSpec: mixture has a single partition, got G = {partitions}"
                    )));
                }
            }
            Variant::Tree => {}
        }

        let block = code_dim / partitions;
        if prior_mean.nrows() != memory_rows || prior_mean.ncols() != block {
            return Err(Error::invalid(format!(
                "ModelSpec: prior mean is {}x{}, expected {}x{}",
                prior_mean.nrows(),
                prior_mean.ncols(),
                memory_rows,
                block
            )));
        }
        // Validates symmetry and positive definiteness.
        MatrixNormal::new(prior_mean.clone(), prior_row_cov.clone())?;

        let (loc_prior_mean, loc_prior_cov) = match variant {
            Variant::GaussianAddress | Variant::CategoricalAddress => {
                if loc_prior_mean.is_some() || loc_prior_cov.is_some() {
                    return Err(Error::invalid(format!(
                        "ModelSpec: {} takes no location prior",
                        variant.as_str()
                    )));
                }
                (None, None)
            }
            Variant::MeanShifted | Variant::Mixture => {
                let mean = loc_prior_mean.unwrap_or_else(|| DVector::zeros(block));
                let cov = loc_prior_cov.unwrap_or_else(|| DMatrix::identity(block, block));
                if mean.len() != block {
                    return Err(Error::invalid(format!(
                        "ModelSpec: location prior mean has length {}, expected {block}",
                        mean.len()
                    )));
                }
                FullGaussian::new(mean.clone(), cov.clone())?;
                (Some(mean), Some(cov))
            }
            Variant::Tree => {
                // The tree model pins the location prior to the standard normal.
                let mean = DVector::zeros(block);
                let cov = DMatrix::identity(block, block);
                if let Some(m) = &loc_prior_mean {
                    if m != &mean {
                        return Err(Error::invalid(
                            "ModelSpec: the tree variant fixes the location prior mean to zero",
                        ));
                    }
                }
                if let Some(c) = &loc_prior_cov {
                    if c != &cov {
                        return Err(Error::invalid(
                            "ModelSpec: the tree variant fixes the location prior covariance to the identity",
                        ));
                    }
                }
                (Some(mean), Some(cov))
            }
        };

        Ok(Self {
            variant,
            memory_rows,
            code_dim,
            clusters,
            partitions,
            sigma_z2,
            prior_mean,
            prior_row_cov,
            loc_prior_mean,
            loc_prior_cov,
        })
    }

    /// Zero prior mean, identity covariances.
    pub fn with_defaults(
        variant: Variant,
        memory_rows: usize,
        code_dim: usize,
        clusters: usize,
        partitions: usize,
        sigma_z2: f64,
    ) -> Result<Self> {
        if partitions == 0 || !code_dim.is_multiple_of(partitions) {
            return Err(Error::invalid(format!(
                "ModelSpec: G = {partitions} must divide C = {code_dim}"
            )));
        }
        let block = code_dim / partitions;
        Self::new(
            variant,
            memory_rows,
            code_dim,
            clusters,
            partitions,
            sigma_z2,
            DMatrix::zeros(memory_rows, block),
            DMatrix::identity(memory_rows, memory_rows),
            None,
            None,
        )
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// K: memory rows per cluster.
    pub fn memory_rows(&self) -> usize {
        self.memory_rows
    }

    /// C: full code dimension.
    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    /// H: clusters per partition.
    pub fn clusters(&self) -> usize {
        self.clusters
    }

    /// G: code partitions.
    pub fn partitions(&self) -> usize {
        self.partitions
    }

    /// C/G: width of one partitioned code block.
    pub fn block_dim(&self) -> usize {
        self.code_dim / self.partitions
    }

    pub fn sigma_z2(&self) -> f64 {
        self.sigma_z2
    }

    pub fn prior_mean(&self) -> &DMatrix<f64> {
        &self.prior_mean
    }

    pub fn prior_row_cov(&self) -> &DMatrix<f64> {
        &self.prior_row_cov
    }

    pub fn loc_prior_mean(&self) -> Option<&DVector<f64>> {
        self.loc_prior_mean.as_ref()
    }

    pub fn loc_prior_cov(&self) -> Option<&DMatrix<f64>> {
        self.loc_prior_cov.as_ref()
    }

    /// The memory prior for one cluster in one partition.
    pub fn memory_prior(&self) -> Result<MatrixNormal> {
        MatrixNormal::new(self.prior_mean.clone(), self.prior_row_cov.clone())
    }

    /// The location prior for one cluster, when the variant has locations.
    pub fn location_prior(&self) -> Result<Option<FullGaussian>> {
        match (&self.loc_prior_mean, &self.loc_prior_cov) {
            (Some(m), Some(c)) => Ok(Some(FullGaussian::new(m.clone(), c.clone())?)),
            _ => Ok(None),
        }
    }

    /// The prior over addressing weights within one partition: `N(0, I_K)`
    /// for Gaussian weights, uniform for categorical ones.
    pub fn weight_prior_gaussian(&self) -> FullGaussian {
        FullGaussian::standard(self.memory_rows)
    }
}

/// Lowers a one-cluster mixture to the structurally identical mean-shifted
/// model with the same hyperparameters.
pub fn reduce_mixture_to_mean_shifted(spec: &ModelSpec) -> Result<ModelSpec> {
    if spec.variant != Variant::Mixture {
        return Err(Error::invalid(format!(
            "reduce_mixture_to_mean_shifted: expected a mixture spec, got {}",
            spec.variant.as_str()
        )));
    }
    if spec.clusters != 1 {
        return Err(Error::invalid(format!(
            "reduce_mixture_to_mean_shifted: requires H = 1, got H = {}",
            spec.clusters
        )));
    }
    ModelSpec::new(
        Variant::MeanShifted,
        spec.memory_rows,
        spec.code_dim,
        1,
        1,
        spec.sigma_z2,
        spec.prior_mean.clone(),
        spec.prior_row_cov.clone(),
        spec.loc_prior_mean.clone(),
        spec.loc_prior_cov.clone(),
    )
}

/// Posterior (or prior) over one cluster's memory matrix and, when present,
/// its location vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPosterior {
    pub memory: MatrixNormal,
    pub location: Option<FullGaussian>,
}

/// Empirical counts over hard-assignment prefixes, one level per partition.
/// Level `g` maps a prefix of `g` earlier assignments to counts over the H
/// clusters of partition `g`. Rows are Laplace-smoothed (+1) when read, so
/// unseen prefixes fall back to the uniform distribution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudocountTable {
    clusters: usize,
    levels: Vec<BTreeMap<Vec<u32>, Vec<u64>>>,
}

impl PseudocountTable {
    pub fn new(clusters: usize, partitions: usize) -> Self {
        Self {
            clusters,
            levels: vec![BTreeMap::new(); partitions],
        }
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn partitions(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.is_empty())
    }

    pub fn levels(&self) -> &[BTreeMap<Vec<u32>, Vec<u64>>] {
        &self.levels
    }

    /// Records one full assignment path (one per timestep).
    pub fn record(&mut self, path: &[u32]) -> Result<()> {
        if path.len() != self.levels.len() {
            return Err(Error::invalid(format!(
                "PseudocountTable::record: path has length {}, expected {}",
                path.len(),
                self.levels.len()
            )));
        }
        for (g, level) in self.levels.iter_mut().enumerate() {
            let h = path[g] as usize;
            if h >= self.clusters {
                return Err(Error::invalid(format!(
                    "PseudocountTable::record: cluster {h} out of range (H = {})",
                    self.clusters
                )));
            }
            let counts = level
                .entry(path[..g].to_vec())
                .or_insert_with(|| vec![0; self.clusters]);
            counts[h] += 1;
        }
        Ok(())
    }

    /// Laplace-smoothed conditional distribution over clusters at level `g`
    /// given the assignment prefix.
    pub fn smoothed(&self, g: usize, prefix: &[u32]) -> Result<OneHotCategorical> {
        if g >= self.levels.len() {
            return Err(Error::invalid(format!(
                "PseudocountTable::smoothed: level {g} out of range"
            )));
        }
        let zero = vec![0u64; self.clusters];
        let counts = self.levels[g].get(prefix).unwrap_or(&zero);
        let total: u64 = counts.iter().sum();
        let denom = total as f64 + self.clusters as f64;
        let probs = DVector::from_iterator(
            self.clusters,
            counts.iter().map(|c| (*c as f64 + 1.0) / denom),
        );
        OneHotCategorical::new(probs)
    }

    /// Replaces the count row for one prefix at one level (used when
    /// rebuilding a table from its serialized form).
    pub(crate) fn insert_level_counts(
        &mut self,
        g: usize,
        prefix: Vec<u32>,
        counts: Vec<u64>,
    ) -> Result<()> {
        if g >= self.levels.len() {
            return Err(Error::invalid(format!(
                "PseudocountTable::insert_level_counts: level {g} out of range"
            )));
        }
        if counts.len() != self.clusters || prefix.len() != g {
            return Err(Error::invalid(
                "PseudocountTable::insert_level_counts: shape mismatch",
            ));
        }
        self.levels[g].insert(prefix, counts);
        Ok(())
    }

    /// Samples one assignment path from the smoothed autoregressive
    /// distribution.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<u32>> {
        let mut path = Vec::with_capacity(self.levels.len());
        for g in 0..self.levels.len() {
            let dist = self.smoothed(g, &path)?;
            path.push(dist.sample_index(rng) as u32);
        }
        Ok(path)
    }
}

/// The full episode-level posterior: per-partition, per-cluster memory and
/// location distributions, plus hard-assignment pseudocounts for the tree
/// variant.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    variant: Variant,
    blocks: Vec<Vec<ClusterPosterior>>, // indexed [partition][cluster]
    pseudocounts: Option<PseudocountTable>,
}

impl MemoryState {
    pub fn new(
        variant: Variant,
        blocks: Vec<Vec<ClusterPosterior>>,
        pseudocounts: Option<PseudocountTable>,
    ) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.is_empty()) {
            return Err(Error::invalid("MemoryState: empty cluster table"));
        }
        let h = blocks[0].len();
        let k = blocks[0][0].memory.rows();
        let c = blocks[0][0].memory.cols();
        for block in &blocks {
            if block.len() != h {
                return Err(Error::invalid("MemoryState: ragged cluster table"));
            }
            for cluster in block {
                if cluster.memory.rows() != k || cluster.memory.cols() != c {
                    return Err(Error::invalid("MemoryState: inconsistent memory shapes"));
                }
                if variant.has_location() != cluster.location.is_some() {
                    return Err(Error::invalid(format!(
                        "MemoryState: location presence does not match variant {}",
                        variant.as_str()
                    )));
                }
                if let Some(loc) = &cluster.location {
                    if loc.dim() != c {
                        return Err(Error::invalid(
                            "MemoryState: location dimension differs from memory columns",
                        ));
                    }
                }
            }
        }
        match variant {
            Variant::GaussianAddress | Variant::CategoricalAddress | Variant::MeanShifted => {
                if blocks.len() != 1 || h != 1 {
                    return Err(Error::invalid(format!(
                        "MemoryState: variant {} expects a single cluster",
                        variant.as_str()
                    )));
                }
            }
            Variant::Mixture => {
                if blocks.len() != 1 {
                    return Err(Error::invalid("MemoryState: mixture expects one partition"));
                }
            }
            Variant::Tree => {}
        }
        if pseudocounts.is_some() && variant != Variant::Tree {
            return Err(Error::invalid(
                "MemoryState: pseudocounts only apply to the tree variant",
            ));
        }
        if let Some(table) = &pseudocounts {
            if table.partitions() != blocks.len() || table.clusters() != h {
                return Err(Error::invalid("MemoryState: pseudocount table shape mismatch"));
            }
        }
        Ok(Self {
            variant,
            blocks,
            pseudocounts,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn partitions(&self) -> usize {
        self.blocks.len()
    }

    pub fn clusters(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn block(&self, g: usize) -> &[ClusterPosterior] {
        &self.blocks[g]
    }

    pub fn blocks(&self) -> &[Vec<ClusterPosterior>] {
        &self.blocks
    }

    pub fn cluster(&self, g: usize, h: usize) -> &ClusterPosterior {
        &self.blocks[g][h]
    }

    pub(crate) fn cluster_mut(&mut self, g: usize, h: usize) -> &mut ClusterPosterior {
        &mut self.blocks[g][h]
    }

    pub fn pseudocounts(&self) -> Option<&PseudocountTable> {
        self.pseudocounts.as_ref()
    }

    pub(crate) fn set_pseudocounts(&mut self, table: PseudocountTable) {
        self.pseudocounts = Some(table);
    }

    /// Shorthand for the single cluster of the non-mixture variants.
    pub fn sole_cluster(&self) -> &ClusterPosterior {
        &self.blocks[0][0]
    }
}

/// One partition's structured address posterior: a distribution over the
/// cluster assignment plus one weight conditional per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureAddress {
    pub assignment: OneHotCategorical,
    pub conditionals: Vec<FullGaussian>,
}

impl MixtureAddress {
    pub fn new(assignment: OneHotCategorical, conditionals: Vec<FullGaussian>) -> Result<Self> {
        if conditionals.len() != assignment.dim() {
            return Err(Error::invalid(format!(
                "MixtureAddress: {} conditionals for {} clusters",
                conditionals.len(),
                assignment.dim()
            )));
        }
        Ok(Self {
            assignment,
            conditionals,
        })
    }
}

/// Per-timestep variational distribution over the addressing variables.
#[derive(Debug, Clone, PartialEq)]
pub enum AddressPosterior {
    /// `q(w_t)`, used by both the plain Gaussian and mean-shifted variants.
    Gaussian(FullGaussian),
    /// `q(w_t)` over one-hot vectors.
    Categorical(OneHotCategorical),
    /// `q(s_t)` plus `q(w_t | s_t = h)` for each cluster.
    Mixture(MixtureAddress),
    /// One independent mixture block per code partition.
    Tree(Vec<MixtureAddress>),
}

impl AddressPosterior {
    pub fn variant_name(&self) -> &'static str {
        match self {
            AddressPosterior::Gaussian(_) => "gaussian",
            AddressPosterior::Categorical(_) => "categorical",
            AddressPosterior::Mixture(_) => "mixture",
            AddressPosterior::Tree(_) => "tree",
        }
    }
}

/// Builds `p(Ω)` in posterior shape together with the per-timestep address
/// prior: standard normal weights and uniform assignments.
pub fn build_priors(spec: &ModelSpec) -> Result<(MemoryState, AddressPosterior)> {
    let memory_prior = spec.memory_prior()?;
    let location_prior = spec.location_prior()?;
    let blocks = (0..spec.partitions())
        .map(|_| {
            (0..spec.clusters())
                .map(|_| ClusterPosterior {
                    memory: memory_prior.clone(),
                    location: location_prior.clone(),
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    let memory = MemoryState::new(spec.variant(), blocks, None)?;

    let address = match spec.variant() {
        Variant::GaussianAddress | Variant::MeanShifted => {
            AddressPosterior::Gaussian(spec.weight_prior_gaussian())
        }
        Variant::CategoricalAddress => {
            AddressPosterior::Categorical(OneHotCategorical::uniform(spec.memory_rows())?)
        }
        Variant::Mixture => AddressPosterior::Mixture(MixtureAddress::new(
            OneHotCategorical::uniform(spec.clusters())?,
            vec![spec.weight_prior_gaussian(); spec.clusters()],
        )?),
        Variant::Tree => {
            let block = MixtureAddress::new(
                OneHotCategorical::uniform(spec.clusters())?,
                vec![spec.weight_prior_gaussian(); spec.clusters()],
            )?;
            AddressPosterior::Tree(vec![block; spec.partitions()])
        }
    };

    Ok((memory, address))
}

// --- JSON ---

#[derive(Serialize, Deserialize)]
struct ModelSpecJson {
    variant: Variant,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "G")]
    g: usize,
    sigma_z2: f64,
    #[serde(rename = "R0")]
    r0: Vec<Vec<f64>>,
    #[serde(rename = "U0")]
    u0: Vec<Vec<f64>>,
    #[serde(rename = "mu_b0", default, skip_serializing_if = "Option::is_none")]
    mu_b0: Option<Vec<f64>>,
    #[serde(rename = "Sigma_b0", default, skip_serializing_if = "Option::is_none")]
    sigma_b0: Option<Vec<Vec<f64>>>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::schema(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::schema(format!("{what}: ragged or empty matrix rows")));
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

pub fn model_spec_to_json(spec: &ModelSpec) -> Result<String> {
    let doc = ModelSpecJson {
        variant: spec.variant,
        k: spec.memory_rows,
        c: spec.code_dim,
        h: spec.clusters,
        g: spec.partitions,
        sigma_z2: spec.sigma_z2,
        r0: matrix_to_rows(&spec.prior_mean),
        u0: matrix_to_rows(&spec.prior_row_cov),
        mu_b0: spec
            .loc_prior_mean
            .as_ref()
            .map(|v| v.iter().copied().collect()),
        sigma_b0: spec.loc_prior_cov.as_ref().map(matrix_to_rows),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn model_spec_from_json(json: &str) -> Result<ModelSpec> {
    let doc: ModelSpecJson =
        serde_json::from_str(json).map_err(|e| Error::schema(format!("model spec JSON: {e}")))?;
    ModelSpec::new(
        doc.variant,
        doc.k,
        doc.c,
        doc.h,
        doc.g,
        doc.sigma_z2,
        rows_to_matrix(&doc.r0, "R0")?,
        rows_to_matrix(&doc.u0, "U0")?,
        doc.mu_b0.map(DVector::from_vec),
        doc.sigma_b0
            .as_deref()
            .map(|rows| rows_to_matrix(rows, "Sigma_b0"))
            .transpose()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_prior_shapes() {
        let spec = ModelSpec::with_defaults(Variant::GaussianAddress, 2, 3, 1, 1, 1.0).unwrap();
        let (memory, address) = build_priors(&spec).unwrap();
        assert_eq!(memory.partitions(), 1);
        assert_eq!(memory.clusters(), 1);
        let cluster = memory.sole_cluster();
        assert_eq!(cluster.memory.rows(), 2);
        assert_eq!(cluster.memory.cols(), 3);
        assert!(cluster.memory.mean().iter().all(|v| *v == 0.0));
        assert_eq!(cluster.memory.row_cov(), &DMatrix::identity(2, 2));
        assert!(cluster.location.is_none());
        match address {
            AddressPosterior::Gaussian(g) => assert_eq!(g.dim(), 2),
            other => panic!("unexpected address prior {other:?}"),
        }
    }

    #[test]
    fn mixture_prior_replicates_clusters() {
        let spec = ModelSpec::with_defaults(Variant::Mixture, 2, 4, 3, 1, 1.0).unwrap();
        let (memory, address) = build_priors(&spec).unwrap();
        assert_eq!(memory.clusters(), 3);
        for h in 0..3 {
            assert_eq!(memory.cluster(0, h), memory.cluster(0, 0));
            assert!(memory.cluster(0, h).location.is_some());
        }
        match address {
            AddressPosterior::Mixture(m) => {
                assert_eq!(m.assignment.dim(), 3);
                assert_eq!(m.conditionals.len(), 3);
            }
            other => panic!("unexpected address prior {other:?}"),
        }
    }

    #[test]
    fn tree_prior_slices_code_dimension() {
        let spec = ModelSpec::with_defaults(Variant::Tree, 3, 10, 2, 2, 1.0).unwrap();
        assert_eq!(spec.block_dim(), 5);
        let (memory, _) = build_priors(&spec).unwrap();
        assert_eq!(memory.partitions(), 2);
        assert_eq!(memory.cluster(1, 0).memory.cols(), 5);
        assert_eq!(memory.cluster(1, 0).location.as_ref().unwrap().dim(), 5);
    }

    #[test]
    fn tree_with_one_partition_matches_mixture_priors() {
        let tree = ModelSpec::with_defaults(Variant::Tree, 2, 4, 3, 1, 0.7).unwrap();
        let mixture = ModelSpec::with_defaults(Variant::Mixture, 2, 4, 3, 1, 0.7).unwrap();
        let (tm, _) = build_priors(&tree).unwrap();
        let (mm, _) = build_priors(&mixture).unwrap();
        for h in 0..3 {
            assert_eq!(tm.cluster(0, h).memory, mm.cluster(0, h).memory);
            assert_eq!(tm.cluster(0, h).location, mm.cluster(0, h).location);
        }
    }

    #[test]
    fn partition_count_must_divide_code_dim() {
        assert!(ModelSpec::with_defaults(Variant::Tree, 2, 10, 2, 3, 1.0).is_err());
    }

    #[test]
    fn mixture_reduction_requires_single_cluster() {
        let ok = ModelSpec::with_defaults(Variant::Mixture, 2, 3, 1, 1, 0.5).unwrap();
        let reduced = reduce_mixture_to_mean_shifted(&ok).unwrap();
        assert_eq!(reduced.variant(), Variant::MeanShifted);
        assert_eq!(reduced.memory_rows(), 2);
        assert_eq!(reduced.code_dim(), 3);
        assert_eq!(reduced.sigma_z2(), 0.5);
        assert_eq!(reduced.prior_mean(), ok.prior_mean());
        assert_eq!(reduced.prior_row_cov(), ok.prior_row_cov());

        let bad = ModelSpec::with_defaults(Variant::Mixture, 2, 3, 2, 1, 0.5).unwrap();
        assert!(reduce_mixture_to_mean_shifted(&bad).is_err());
    }

    #[test]
    fn build_priors_is_deterministic() {
        let spec = ModelSpec::with_defaults(Variant::Tree, 2, 6, 2, 2, 1.0).unwrap();
        let a = build_priors(&spec).unwrap();
        let b = build_priors(&spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::with_defaults(Variant::Mixture, 2, 4, 3, 1, 0.8).unwrap();
        let json = model_spec_to_json(&spec).unwrap();
        let back = model_spec_from_json(&json).unwrap();
        assert_eq!(spec, back);
        assert!(json.contains("\"sigma_z2\""));
        assert!(json.contains("\"R0\""));
    }

    #[test]
    fn tree_rejects_non_standard_location_prior() {
        let err = ModelSpec::new(
            Variant::Tree,
            2,
            4,
            2,
            2,
            1.0,
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            Some(DVector::from_vec(vec![1.0, 1.0])),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn pseudocount_smoothing_normalizes() {
        let mut table = PseudocountTable::new(3, 2);
        table.record(&[0, 2]).unwrap();
        table.record(&[0, 1]).unwrap();
        table.record(&[1, 2]).unwrap();
        let root = table.smoothed(0, &[]).unwrap();
        // Counts [2, 1, 0] with +1 smoothing over total 3 + 3.
        assert!((root.probs()[0] - 3.0 / 6.0).abs() < 1e-15);
        assert!((root.probs()[1] - 2.0 / 6.0).abs() < 1e-15);
        assert!((root.probs()[2] - 1.0 / 6.0).abs() < 1e-15);
        // Unseen prefix falls back to uniform.
        let unseen = table.smoothed(1, &[2]).unwrap();
        for i in 0..3 {
            assert!((unseen.probs()[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
