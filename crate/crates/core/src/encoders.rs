//! Feature embedding tables and twin-tower MLP encoders.
//!
//! Every category level owns a full user/item tower pair; the per-feature
//! embedding tables are the only parameters shared between levels. Tower
//! outputs are ℓ2-normalized, so the cosine between sub-embeddings is a
//! plain dot product and the nested kernel `K(E^c)` is the mean of the first
//! `c` sub-kernels.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GnolrError, Result};
use crate::tensor::{
    dot, l2_normalize, l2_normalize_backward, leaky_relu_backward, leaky_relu_forward, matmul_forward, matmul_nt,
    matmul_tn, Matrix, Parameter,
};

pub const EMBED_DIM: usize = 16;
pub const DEFAULT_SLOPE: f64 = 0.01;
const EMBED_INIT_RANGE: f64 = 0.05;

/// One table per feature, `vocab × dim`. Row 0 is the out-of-vocabulary bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTableSet {
    dim: usize,
    tables: Vec<Parameter>,
}

impl EmbeddingTableSet {
    pub fn new(prefix: &str, vocab_sizes: &[usize], dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let tables = vocab_sizes
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let v = v.max(1);
                let m = Matrix::from_fn(v, dim, |_, _| rng.gen_range(-EMBED_INIT_RANGE..EMBED_INIT_RANGE));
                Parameter::new(format!("{prefix}.emb{f}"), m).sparse()
            })
            .collect();
        Self { dim, tables }
    }

    pub fn from_tables(dim: usize, tables: Vec<Parameter>) -> Result<Self> {
        for t in &tables {
            if t.value.cols() != dim {
                return Err(GnolrError::dim("embedding table", dim, t.value.cols()));
            }
        }
        Ok(Self { dim, tables })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_features(&self) -> usize {
        self.tables.len()
    }

    /// Width of the concatenated lookup.
    pub fn output_len(&self) -> usize {
        self.dim * self.tables.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.value.rows()).collect()
    }

    pub fn tables(&self) -> &[Parameter] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Parameter] {
        &mut self.tables
    }

    #[inline]
    fn row_index(&self, feature: usize, id: u32) -> usize {
        let id = id as usize;
        if id < self.tables[feature].value.rows() {
            id
        } else {
            0
        }
    }

    /// Concatenated lookup, features in table order.
    pub fn embed_features(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.len() != self.tables.len() {
            return Err(GnolrError::dim("embed_features", self.tables.len(), ids.len()));
        }
        let mut out = Vec::with_capacity(self.output_len());
        for (f, &id) in ids.iter().enumerate() {
            out.extend_from_slice(self.tables[f].value.row(self.row_index(f, id)));
        }
        Ok(out)
    }

    pub fn gather(&self, rows: &[&[u32]]) -> Result<Matrix> {
        let width = self.output_len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for ids in rows {
            data.extend(self.embed_features(ids)?);
        }
        Matrix::new(rows.len(), width, data)
    }

    /// Adds a batch gradient with respect to the gathered input into the table
    /// gradient buffers. Rows are visited in batch order.
    pub fn scatter_grad(&mut self, rows: &[&[u32]], grad: &Matrix) {
        let d = self.dim;
        for (b, ids) in rows.iter().enumerate() {
            let g = grad.row(b);
            for (f, &id) in ids.iter().enumerate() {
                let r = self.row_index(f, id);
                let dst = self.tables[f].grad.row_mut(r);
                for (x, y) in dst.iter_mut().zip(&g[f * d..(f + 1) * d]) {
                    *x += *y;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerConfig {
    pub hidden_sizes: Vec<usize>,
    pub slope: f64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![128, 64, 32],
            slope: DEFAULT_SLOPE,
        }
    }
}

impl TowerConfig {
    /// The wider variant used for the shared-encoder ordinal baseline.
    pub fn wide() -> Self {
        Self {
            hidden_sizes: vec![256, 128, 64],
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn new(hidden_sizes: Vec<usize>, slope: f64) -> Result<Self> {
        let cfg = Self { hidden_sizes, slope };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(GnolrError::Argument(format!(
                "tower widths must be non-empty and ≥ 1, got {:?}",
                self.hidden_sizes
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(GnolrError::Argument(format!(
                "LeakyReLU slope must lie in (0,1), got {}",
                self.slope
            )));
        }
        Ok(())
    }

    /// Final embedding size (the last layer width).
    pub fn output_dim(&self) -> usize {
        *self.hidden_sizes.last().expect("validated tower config")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// MLP with LeakyReLU between layers and no activation after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub layers: Vec<Dense>,
    pub slope: f64,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TowerTrace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    /// Normalized output, one row per sample.
    pub out: Matrix,
    norms: Vec<f64>,
    /// Rows whose raw output had (near) zero norm.
    pub degenerate: usize,
}

impl Tower {
    pub fn new(name: &str, input_dim: usize, cfg: &TowerConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.hidden_sizes.len());
        let mut fan_in = input_dim;
        for (l, &fan_out) in cfg.hidden_sizes.iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
            layers.push(Dense {
                weight: Parameter::new(format!("{name}.w{l}"), w),
                bias: Parameter::new(format!("{name}.b{l}"), Matrix::zeros(1, fan_out)),
            });
            fan_in = fan_out;
        }
        Self {
            layers,
            slope: cfg.slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.value.cols())
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<TowerTrace> {
        if x.cols() != self.input_dim() {
            return Err(GnolrError::dim("tower_forward", self.input_dim(), x.cols()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = matmul_forward(&h, &layer.weight.value)?;
            let bias = layer.bias.value.row(0);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                    *v += *b;
                }
            }
            let next = if l < last {
                leaky_relu_forward(&z, self.slope)
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        let mut out = Matrix::zeros(h.rows(), h.cols());
        let mut norms = Vec::with_capacity(h.rows());
        let mut degenerate = 0;
        for r in 0..h.rows() {
            let n = l2_normalize(h.row(r));
            degenerate += n.degenerate as usize;
            norms.push(n.norm);
            out.row_mut(r).copy_from_slice(&n.values);
        }
        Ok(TowerTrace {
            inputs,
            pre,
            out,
            norms,
            degenerate,
        })
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the tower input.
    pub fn backward_batch(&mut self, trace: &TowerTrace, d_out: &Matrix) -> Result<Matrix> {
        let mut g = Matrix::zeros(d_out.rows(), d_out.cols());
        for r in 0..d_out.rows() {
            let row = l2_normalize_backward(trace.out.row(r), trace.norms[r], d_out.row(r));
            g.row_mut(r).copy_from_slice(&row);
        }
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l < last {
                g = leaky_relu_backward(&g, &trace.pre[l], self.slope);
            }
            let layer = &mut self.layers[l];
            let gw = matmul_tn(&trace.inputs[l], &g)?;
            layer.weight.grad.add_assign(&gw)?;
            let gb = layer.bias.grad.row_mut(0);
            for r in 0..g.rows() {
                for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                    *acc += *v;
                }
            }
            g = matmul_nt(&g, &layer.weight.value)?;
        }
        Ok(g)
    }
}

/// Runs one input vector through a tower. Returns the normalized output and
/// whether it was degenerate.
pub fn tower_forward(input: &[f64], tower: &Tower) -> Result<(Vec<f64>, bool)> {
    let x = Matrix::new(1, input.len(), input.to_vec())?;
    let trace = tower.forward_batch(&x)?;
    Ok((trace.out.row(0).to_vec(), trace.degenerate > 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerPair {
    pub user: Tower,
    pub item: Tower,
}

/// Per-entity sequence of unit sub-embeddings `e^1..e^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedEmbedding {
    pub subs: Vec<Vec<f64>>,
}

impl NestedEmbedding {
    pub fn levels(&self) -> usize {
        self.subs.len()
    }

    /// `E^c = [e^1 … e^c]`.
    pub fn prefix(&self, c: usize) -> Vec<f64> {
        self.subs[..c].iter().flatten().copied().collect()
    }

    /// `E^T`, the unified embedding.
    pub fn unified(&self) -> Vec<f64> {
        self.prefix(self.subs.len())
    }
}

/// Cosine of the nested prefixes, `K(E_u^c, E_i^c) = (Σ_{j≤c} e_u^j·e_i^j) / c`.
pub fn nested_kernel(user: &NestedEmbedding, item: &NestedEmbedding, c: usize) -> Result<f64> {
    let t = user.levels().min(item.levels());
    if c == 0 || c > t {
        return Err(GnolrError::Argument(format!("nested level {c} outside 1..={t}")));
    }
    let s: f64 = (0..c).map(|j| dot(&user.subs[j], &item.subs[j])).sum();
    Ok(s / c as f64)
}

/// Shared feature tables plus `P` independent tower pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedEncoder {
    pub user_tables: EmbeddingTableSet,
    pub item_tables: EmbeddingTableSet,
    pub pairs: Vec<TowerPair>,
}

/// Forward state of a batch through every tower pair.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub pairs: Vec<(TowerTrace, TowerTrace)>,
}

impl EncoderTrace {
    /// Sub-kernels `s[b][p] = e_u^p · e_i^p` for every sample and pair.
    pub fn sub_kernels(&self) -> Matrix {
        let rows = self.pairs.first().map_or(0, |(u, _)| u.out.rows());
        let p = self.pairs.len();
        let mut m = Matrix::zeros(rows, p);
        for (j, (u, i)) in self.pairs.iter().enumerate() {
            for b in 0..rows {
                m.set(b, j, dot(u.out.row(b), i.out.row(b)));
            }
        }
        m
    }

    pub fn degenerate(&self) -> usize {
        self.pairs.iter().map(|(u, i)| u.degenerate + i.degenerate).sum()
    }
}

impl NestedEncoder {
    pub fn new(
        user_vocab: &[usize],
        item_vocab: &[usize],
        embed_dim: usize,
        num_pairs: usize,
        cfg: &TowerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_pairs == 0 {
            return Err(GnolrError::Argument("at least one tower pair is required".into()));
        }
        if user_vocab.is_empty() || item_vocab.is_empty() {
            return Err(GnolrError::Argument("each side needs at least one feature".into()));
        }
        let user_tables = EmbeddingTableSet::new("user", user_vocab, embed_dim, rng);
        let item_tables = EmbeddingTableSet::new("item", item_vocab, embed_dim, rng);
        let pairs = (0..num_pairs)
            .map(|p| TowerPair {
                user: Tower::new(&format!("pair{p}.user"), user_tables.output_len(), cfg, rng),
                item: Tower::new(&format!("pair{p}.item"), item_tables.output_len(), cfg, rng),
            })
            .collect();
        Ok(Self {
            user_tables,
            item_tables,
            pairs,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn output_dim(&self) -> usize {
        self.pairs[0].user.output_dim()
    }

    /// All parameters in a fixed order: user tables, item tables, then each
    /// pair's user and item tower.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        out.extend(self.user_tables.tables());
        out.extend(self.item_tables.tables());
        for p in &self.pairs {
            out.extend(p.user.params());
            out.extend(p.item.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        out.extend(self.user_tables.tables_mut().iter_mut());
        out.extend(self.item_tables.tables_mut().iter_mut());
        for p in &mut self.pairs {
            out.extend(p.user.params_mut());
            out.extend(p.item.params_mut());
        }
        out
    }

    pub fn forward_batch(&self, user_rows: &[&[u32]], item_rows: &[&[u32]]) -> Result<EncoderTrace> {
        let xu = self.user_tables.gather(user_rows)?;
        let xi = self.item_tables.gather(item_rows)?;
        let pairs = self
            .pairs
            .iter()
            .map(|p| Ok((p.user.forward_batch(&xu)?, p.item.forward_batch(&xi)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderTrace { pairs })
    }

    /// Back-propagates `∂L/∂s[b][p]` through every pair into tower and table
    /// gradients.
    pub fn backward_batch(
        &mut self,
        user_rows: &[&[u32]],
        item_rows: &[&[u32]],
        trace: &EncoderTrace,
        d_kernels: &Matrix,
    ) -> Result<()> {
        let b = d_kernels.rows();
        let mut dxu = Matrix::zeros(b, self.user_tables.output_len());
        let mut dxi = Matrix::zeros(b, self.item_tables.output_len());
        for (j, (pair, (tu, ti))) in self.pairs.iter_mut().zip(&trace.pairs).enumerate() {
            let d = tu.out.cols();
            let mut du = Matrix::zeros(b, d);
            let mut di = Matrix::zeros(b, d);
            let mut any = false;
            for r in 0..b {
                let g = d_kernels.get(r, j);
                if g == 0.0 {
                    continue;
                }
                any = true;
                for ((x, y), (ur, ir)) in du
                    .row_mut(r)
                    .iter_mut()
                    .zip(di.row_mut(r).iter_mut())
                    .zip(tu.out.row(r).iter().zip(ti.out.row(r)))
                {
                    *x = g * ir;
                    *y = g * ur;
                }
            }
            if !any {
                continue;
            }
            dxu.add_assign(&pair.user.backward_batch(tu, &du)?)?;
            dxi.add_assign(&pair.item.backward_batch(ti, &di)?)?;
        }
        self.user_tables.scatter_grad(user_rows, &dxu);
        self.item_tables.scatter_grad(item_rows, &dxi);
        Ok(())
    }

    /// Sub-embeddings of one user/item pair through every tower pair.
    pub fn nested_forward(&self, user_ids: &[u32], item_ids: &[u32]) -> Result<(NestedEmbedding, NestedEmbedding)> {
        let xu = self.user_tables.embed_features(user_ids)?;
        let xi = self.item_tables.embed_features(item_ids)?;
        let mut us = Vec::with_capacity(self.pairs.len());
        let mut is = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            us.push(tower_forward(&xu, &p.user)?.0);
            is.push(tower_forward(&xi, &p.item)?.0);
        }
        Ok((NestedEmbedding { subs: us }, NestedEmbedding { subs: is }))
    }

    /// Sub-embeddings for many entities of one side, one `NestedEmbedding`
    /// per row.
    pub fn encode_side(&self, side: Side, rows: &[&[u32]]) -> Result<Vec<NestedEmbedding>> {
        let (tables, pick): (&EmbeddingTableSet, fn(&TowerPair) -> &Tower) = match side {
            Side::User => (&self.user_tables, |p| &p.user),
            Side::Item => (&self.item_tables, |p| &p.item),
        };
        let mut out: Vec<NestedEmbedding> = (0..rows.len()).map(|_| NestedEmbedding { subs: Vec::new() }).collect();
        for chunk_start in (0..rows.len()).step_by(4096) {
            let chunk = &rows[chunk_start..(chunk_start + 4096).min(rows.len())];
            let x = tables.gather(chunk)?;
            for p in &self.pairs {
                let trace = pick(p).forward_batch(&x)?;
                for (r, e) in out[chunk_start..chunk_start + chunk.len()].iter_mut().enumerate() {
                    e.subs.push(trace.out.row(r).to_vec());
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// `printf("%.9g")`-style rendering.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Embedding export: a header line `#gnolr-emb v1 dim=D T=<T>` followed by
/// `entity_id<TAB>v1<TAB>…<TAB>vD` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub levels: usize,
    pub dim: usize,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f32>>,
}

impl EmbeddingFile {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#gnolr-emb v1 dim={} T={}", self.dim, self.levels)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            if row.len() != self.dim {
                return Err(GnolrError::dim("embedding export", self.dim, row.len()));
            }
            if id.contains('\t') || id.contains('\n') {
                return Err(GnolrError::Format(format!(
                    "entity id {id:?} contains a tab or newline"
                )));
            }
            w.write_all(id.as_bytes())?;
            for v in row {
                write!(w, "\t{}", format_sig9(*v as f64))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| GnolrError::Format("empty embedding file".into()))??;
        let mut dim = None;
        let mut levels = None;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("#gnolr-emb") || parts.next() != Some("v1") {
            return Err(GnolrError::Format(format!("bad embedding header {header:?}")));
        }
        for p in parts {
            if let Some(v) = p.strip_prefix("dim=") {
                dim = v.parse().ok();
            } else if let Some(v) = p.strip_prefix("T=") {
                levels = v.parse().ok();
            }
        }
        let (dim, levels) = match (dim, levels) {
            (Some(d), Some(t)) => (d, t),
            _ => return Err(GnolrError::Format(format!("bad embedding header {header:?}"))),
        };
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let row = fields
                .map(|f| {
                    f.parse::<f32>()
                        .map_err(|e| GnolrError::Format(format!("line {}: {e}", n + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != dim {
                return Err(GnolrError::Format(format!(
                    "line {}: expected {dim} values, got {}",
                    n + 2,
                    row.len()
                )));
            }
            ids.push(id);
            rows.push(row);
        }
        Ok(Self { levels, dim, ids, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FdConfig};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn lookup_examples() {
        let mut t = EmbeddingTableSet::new("u", &[3, 2], EMBED_DIM, &mut rng(0));
        t.tables_mut()[0].value.row_mut(1).fill(0.1);
        let v = t.embed_features(&[1, 1]).unwrap();
        assert_eq!(v.len(), 32);
        assert_eq!(&v[..16], &[0.1; 16]);
        assert_eq!(&v[16..], t.tables()[1].value.row(1));
        // out of vocabulary falls back to row 0
        let v = t.embed_features(&[99, 0]).unwrap();
        assert_eq!(&v[..16], t.tables()[0].value.row(0));
        assert!(t.embed_features(&[1]).is_err());
    }

    #[test]
    fn zero_tower_is_degenerate() {
        let cfg = TowerConfig::new(vec![4, 3], 0.01).unwrap();
        let mut tower = Tower::new("t", 5, &cfg, &mut rng(1));
        for p in tower.params_mut() {
            p.value.fill(0.0);
        }
        let (out, degenerate) = tower_forward(&[1.0; 5], &tower).unwrap();
        assert!(degenerate);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_tower_normalizes_input() {
        let cfg = TowerConfig::new(vec![3], 0.01).unwrap();
        let mut tower = Tower::new("t", 3, &cfg, &mut rng(2));
        tower.layers[0].weight.value = Matrix::identity(3);
        let (out, _) = tower_forward(&[0.0, 3.0, 4.0], &tower).unwrap();
        assert!((out[1] - 0.6).abs() < 1e-15 && (out[2] - 0.8).abs() < 1e-15);
        assert!(tower_forward(&[1.0; 4], &tower).is_err());
    }

    #[test]
    fn random_towers_emit_unit_vectors() {
        let mut r = rng(3);
        let cfg = TowerConfig::new(vec![8, 6, 4], 0.01).unwrap();
        for _ in 0..1000 {
            let tower = Tower::new("t", 5, &cfg, &mut r);
            let x: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (out, _) = tower_forward(&x, &tower).unwrap();
            let n = dot(&out, &out).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tower_backward_matches_finite_differences() {
        let cfg = TowerConfig::new(vec![6, 3], 0.01).unwrap();
        let mut tower = Tower::new("t", 4, &cfg, &mut rng(4));
        let x = Matrix::from_fn(5, 4, |r, c| ((r * 4 + c) as f64 * 0.37).sin());
        let w = Matrix::from_fn(5, 3, |r, c| ((r + 2 * c) as f64 * 0.91).cos());
        let trace = tower.forward_batch(&x).unwrap();
        let dx = tower.backward_batch(&trace, &w).unwrap();
        let loss = |xs: &[f64]| {
            let xm = Matrix::new(5, 4, xs.to_vec()).unwrap();
            let tr = tower.forward_batch(&xm).unwrap();
            dot(tr.out.data(), w.data())
        };
        let report = finite_diff_check(loss, x.data(), dx.data(), &FdConfig::default());
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn nested_shapes_and_determinism() {
        let cfg = TowerConfig::default();
        let enc = NestedEncoder::new(&[10], &[10, 5], EMBED_DIM, 2, &cfg, &mut rng(5)).unwrap();
        let (u, i) = enc.nested_forward(&[3], &[4, 1]).unwrap();
        assert_eq!(u.unified().len(), 64);
        assert_eq!(i.levels(), 2);
        let (u2, i2) = enc.nested_forward(&[3], &[4, 1]).unwrap();
        assert_eq!((u, i), (u2, i2));
        let single = NestedEncoder::new(&[10], &[10], EMBED_DIM, 1, &cfg, &mut rng(5)).unwrap();
        assert_eq!(single.nested_forward(&[1], &[1]).unwrap().0.unified().len(), 32);
    }

    #[test]
    fn prefix_norms_and_kernel_identity() {
        let cfg = TowerConfig::new(vec![8, 5], 0.01).unwrap();
        let enc = NestedEncoder::new(&[7], &[7], 4, 3, &cfg, &mut rng(6)).unwrap();
        let (u, i) = enc.nested_forward(&[2], &[5]).unwrap();
        for c in 1..=3 {
            let e = u.prefix(c);
            assert!((dot(&e, &e) - c as f64).abs() < 1e-8);
            let direct: f64 = (0..c).map(|j| dot(&u.subs[j], &i.subs[j])).sum::<f64>() / c as f64;
            assert!((nested_kernel(&u, &i, c).unwrap() - direct).abs() < 1e-12);
            let cos = crate::tensor::cosine_kernel(&u.prefix(c), &i.prefix(c)).unwrap();
            assert!((cos - direct).abs() < 1e-12);
        }
        assert!(nested_kernel(&u, &i, 0).is_err());
        assert!(nested_kernel(&u, &i, 4).is_err());
        assert!((nested_kernel(&u, &u, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_stay_in_their_own_pair() {
        let cfg = TowerConfig::new(vec![6, 4], 0.01).unwrap();
        let mut enc = NestedEncoder::new(&[5], &[5], 4, 2, &cfg, &mut rng(7)).unwrap();
        let users: Vec<&[u32]> = vec![&[1], &[2]];
        let items: Vec<&[u32]> = vec![&[3], &[4]];
        let trace = enc.forward_batch(&users, &items).unwrap();
        let mut d = Matrix::zeros(2, 2);
        d.set(0, 0, 1.0);
        d.set(1, 0, -0.5);
        enc.backward_batch(&users, &items, &trace, &d).unwrap();
        assert!(enc.pairs[1]
            .user
            .params()
            .all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        assert!(enc.pairs[1]
            .item
            .params()
            .all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
        assert!(enc.pairs[0]
            .user
            .params()
            .any(|p| p.grad.data().iter().any(|&g| g != 0.0)));
        // untouched embedding rows carry no gradient
        assert!(enc.user_tables.tables()[0].grad.row(0).iter().all(|&g| g == 0.0));
        assert!(enc.user_tables.tables()[0].grad.row(1).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(0.5), "0.5");
        assert_eq!(format_sig9(-0.123456789123), "-0.123456789");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(123.0), "123");
        assert_eq!(format_sig9(0.999999999999), "1");
    }

    #[test]
    fn embedding_file_round_trip() {
        let f = EmbeddingFile {
            levels: 2,
            dim: 3,
            ids: vec!["u1".into(), "u2".into()],
            rows: vec![vec![0.5, -0.25, 0.1], vec![1.0, 0.0, -1.0]],
        };
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("#gnolr-emb v1 dim=3 T=2\nu1\t0.5\t-0.25\t0.100000001\n"));
        let back = EmbeddingFile::read(&buf[..]).unwrap();
        assert_eq!(back, f);
        assert!(EmbeddingFile::read(&b"#other\n"[..]).is_err());
    }
}
