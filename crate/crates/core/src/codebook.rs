//! Action-conditioned codebook: one attractor network per latent factor plus the map
//! from dataset actions to per-factor bump moves.

use std::collections::HashMap;
use std::io::Write;

use crate::attractor::{
    action_basis, circular_units, roll_center, roll_pattern, stationary_bump, ActionBasis, CannParams, Move, Topology,
};
use crate::error::{GcqError, Result};
use crate::exact::ExactSum;

/// Index of a symbol in an [`ActionMap`], in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionId(pub usize);

/// Injective map from dataset action symbols to per-factor moves.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMap {
    entries: Vec<(String, Vec<Move>)>,
    noop: ActionId,
    lookup: HashMap<String, ActionId>,
}

impl ActionMap {
    /// Declaration order is preserved and used for tie-breaking. If `noop` is not among
    /// the entries it is prepended with an all-stay tuple.
    pub fn new(entries: Vec<(String, Vec<Move>)>, noop: &str, topologies: &[Topology]) -> Result<Self> {
        let m = topologies.len();
        if m == 0 {
            return Err(GcqError::InvalidParameter {
                name: "factors",
                reason: "need at least one factor".into(),
            });
        }
        let mut entries = entries;
        if !entries.iter().any(|(s, _)| s == noop) {
            entries.insert(0, (noop.to_string(), vec![Move::Stay; m]));
        }
        let capacity: usize = topologies.iter().map(|t| t.moves().len()).product();
        if entries.len() > capacity {
            return Err(GcqError::ActionCapacity {
                count: entries.len(),
                factors: m,
                capacity,
            });
        }
        let mut lookup = HashMap::new();
        let mut seen: HashMap<&[Move], &str> = HashMap::new();
        for (i, (symbol, moves)) in entries.iter().enumerate() {
            if moves.len() != m {
                return Err(GcqError::DimensionMismatch {
                    context: "action move tuple",
                    expected: m,
                    found: moves.len(),
                });
            }
            for (mv, topo) in moves.iter().zip(topologies) {
                if !topo.moves().contains(mv) {
                    return Err(GcqError::InvalidParameter {
                        name: "actions",
                        reason: format!(
                            "move `{}` of `{symbol}` is not available on a {}",
                            mv.token(),
                            topo.name()
                        ),
                    });
                }
            }
            if symbol == noop && moves.iter().any(|&mv| mv != Move::Stay) {
                return Err(GcqError::InvalidParameter {
                    name: "actions",
                    reason: format!("no-op `{noop}` must map to all-stay"),
                });
            }
            if let Some(first) = seen.insert(moves.as_slice(), symbol) {
                return Err(GcqError::NonInjectiveActionMap {
                    first: first.to_string(),
                    second: symbol.clone(),
                });
            }
            if lookup.insert(symbol.clone(), ActionId(i)).is_some() {
                return Err(GcqError::NonInjectiveActionMap {
                    first: symbol.clone(),
                    second: symbol.clone(),
                });
            }
        }
        let noop = lookup[noop];
        Ok(ActionMap { entries, noop, lookup })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn factors(&self) -> usize {
        self.entries[0].1.len()
    }

    pub fn noop(&self) -> ActionId {
        self.noop
    }

    pub fn id(&self, symbol: &str) -> Result<ActionId> {
        self.lookup
            .get(symbol)
            .copied()
            .ok_or_else(|| GcqError::UnknownAction(symbol.to_string()))
    }

    pub fn resolve<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<ActionId>> {
        symbols.iter().map(|s| self.id(s.as_ref())).collect()
    }

    pub fn symbol(&self, id: ActionId) -> &str {
        &self.entries[id.0].0
    }

    pub fn moves(&self, id: ActionId) -> Result<&[Move]> {
        self.entries
            .get(id.0)
            .map(|(_, m)| m.as_slice())
            .ok_or_else(|| GcqError::UnknownAction(format!("#{}", id.0)))
    }

    pub fn ids(&self) -> impl Iterator<Item = ActionId> {
        (0..self.entries.len()).map(ActionId)
    }

    pub fn entries(&self) -> &[(String, Vec<Move>)] {
        &self.entries
    }
}

/// Rolls codeword index `i` by one move of `step` centres.
pub fn roll_index(i: usize, mv: Move, step: usize, topology: Topology, centers_per_axis: usize) -> usize {
    roll_center(i, mv, step, topology, centers_per_axis)
}

/// One factor's attractor network and its codewords.
#[derive(Debug, Clone)]
pub struct Factor {
    pub params: CannParams,
    pub step: usize,
    codewords: Vec<Vec<f64>>,
    basis: ActionBasis,
}

impl Factor {
    fn from_codewords(params: CannParams, step: usize, codewords: Vec<Vec<f64>>) -> Result<Self> {
        let patterns: Vec<_> = codewords
            .iter()
            .enumerate()
            .map(|(i, values)| crate::attractor::BumpPattern {
                values: values.clone(),
                center: Some(i),
            })
            .collect();
        let basis = action_basis(&params, &patterns, step)?;
        Ok(Factor {
            params,
            step,
            codewords,
            basis,
        })
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.neuron_count()
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.codewords[i]
    }

    pub fn codewords(&self) -> &[Vec<f64>] {
        &self.codewords
    }

    pub fn basis(&self) -> &ActionBasis {
        &self.basis
    }

    pub fn topology(&self) -> Topology {
        self.params.topology
    }

    pub fn roll(&self, i: usize, mv: Move) -> usize {
        roll_index(i, mv, self.step, self.params.topology, self.params.centers_per_axis())
    }

    /// Shortest number of moves separating two codeword indices, summed over axes.
    pub fn index_distance(&self, a: usize, b: usize) -> usize {
        let l = self.params.centers_per_axis();
        match self.params.topology {
            Topology::Ring => circular_units(a, b, l),
            Topology::Torus => circular_units(a / l, b / l, l) + circular_units(a % l, b % l, l),
        }
    }
}

/// Codeword trajectory `e_base (+) a_1 .. a_{n-1}` for one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrajectory {
    pub base: usize,
    pub indices: Vec<usize>,
    pub patterns: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    factors: Vec<Factor>,
    action_map: ActionMap,
    learnable: bool,
}

/// Builds a fixed codebook: one factor per parameter set, codewords from the stationary
/// bumps.
pub fn build_codebook(params: &[CannParams], steps: &[usize], action_map: ActionMap) -> Result<Codebook> {
    if params.len() != steps.len() || params.len() != action_map.factors() {
        return Err(GcqError::DimensionMismatch {
            context: "codebook factors",
            expected: action_map.factors(),
            found: params.len(),
        });
    }
    let factors = params
        .iter()
        .zip(steps)
        .map(|(p, &step)| {
            p.validate()?;
            let codewords = (0..p.attractor_count())
                .map(|c| stationary_bump(p, c).map(|b| b.values))
                .collect::<Result<Vec<_>>>()?;
            Factor::from_codewords(p.clone(), step, codewords)
        })
        .collect::<Result<Vec<_>>>()?;
    check_topologies(&factors, &action_map)?;
    Ok(Codebook {
        factors,
        action_map,
        learnable: false,
    })
}

fn check_topologies(factors: &[Factor], map: &ActionMap) -> Result<()> {
    for (_, moves) in map.entries() {
        for (mv, f) in moves.iter().zip(factors) {
            if !f.topology().moves().contains(mv) {
                return Err(GcqError::InvalidParameter {
                    name: "actions",
                    reason: format!("move `{}` not available on a {}", mv.token(), f.topology().name()),
                });
            }
        }
    }
    Ok(())
}

impl Codebook {
    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, j: usize) -> &Factor {
        &self.factors[j]
    }

    /// Number of factors m.
    pub fn m(&self) -> usize {
        self.factors.len()
    }

    pub fn action_map(&self) -> &ActionMap {
        &self.action_map
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    /// Concatenated latent width, the sum of factor dimensions.
    pub fn latent_dim(&self) -> usize {
        self.factors.iter().map(|f| f.dim()).sum()
    }

    /// Turns the codebook into a learnable one whose codewords are all rolls of one
    /// per-factor prototype, initialised from codeword 0.
    pub fn into_learnable(mut self) -> Result<Self> {
        for f in &self.factors {
            if f.params.subdivision != 1 {
                return Err(GcqError::InvalidParameter {
                    name: "learnable",
                    reason: "learnable codewords require one attractor per neuron".into(),
                });
            }
        }
        self.learnable = true;
        Ok(self)
    }

    /// Prototype of factor `j`: the codeword at index 0.
    pub fn prototype(&self, j: usize) -> &[f64] {
        &self.factors[j].codewords[0]
    }

    /// Replaces the prototype of a learnable factor and regenerates every codeword as a
    /// roll of it.
    pub fn set_prototype(&mut self, j: usize, prototype: &[f64]) -> Result<()> {
        if !self.learnable {
            return Err(GcqError::LearnableFlagMismatch { expected: true });
        }
        let f = &self.factors[j];
        if prototype.len() != f.dim() {
            return Err(GcqError::DimensionMismatch {
                context: "prototype",
                expected: f.dim(),
                found: prototype.len(),
            });
        }
        if let Some(bad) = prototype.iter().find(|x| !x.is_finite()) {
            return Err(GcqError::NonFinite(format!("prototype value {bad}")));
        }
        let codewords = rolled_family(prototype, &f.params);
        self.factors[j] = Factor::from_codewords(f.params.clone(), f.step, codewords)?;
        Ok(())
    }

    /// Checks that every action maps every codeword onto another codeword exactly.
    pub fn check_closure(&self) -> Result<()> {
        for (j, f) in self.factors.iter().enumerate() {
            let n = f.params.neurons_per_axis;
            let r = f.params.subdivision;
            for i in 0..f.len() {
                for &mv in f.topology().moves() {
                    let target = f.roll(i, mv);
                    if f.step % r == 0 {
                        let (ox, oy) = mv.offsets();
                        let s = (f.step / r) as i64;
                        let rolled = roll_pattern(&f.codewords[i], f.topology(), n, (ox * s, oy * s));
                        if rolled != f.codewords[target] {
                            return Err(GcqError::InvalidParameter {
                                name: "codebook",
                                reason: format!(
                                    "factor {j}: codeword {i} under `{}` is not codeword {target}",
                                    mv.token()
                                ),
                            });
                        }
                    }
                    let v = f.basis.at(i, mv).expect("move on factor topology");
                    let moved: Vec<f64> = (0..f.dim())
                        .map(|k| {
                            let mut acc = ExactSum::new();
                            acc.add(f.codewords[i][k]);
                            acc.add(v.delta[k]);
                            acc.add(v.error[k]);
                            acc.value()
                        })
                        .collect();
                    if moved != f.codewords[target] {
                        return Err(GcqError::InvalidParameter {
                            name: "codebook",
                            reason: format!(
                                "factor {j}: shift of codeword {i} under `{}` left the codebook",
                                mv.token()
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Cumulative codeword indices of factor `j` starting from `base`.
    pub fn trajectory_indices(&self, j: usize, base: usize, actions: &[ActionId]) -> Result<Vec<usize>> {
        let f = &self.factors[j];
        let mut out = Vec::with_capacity(actions.len() + 1);
        let mut cur = base;
        out.push(cur);
        for &a in actions {
            cur = f.roll(cur, self.action_map.moves(a)?[j]);
            out.push(cur);
        }
        Ok(out)
    }

    /// Index-roll materialisation of `e_base (+) actions`.
    pub fn candidate_trajectory(&self, j: usize, base: usize, actions: &[ActionId]) -> Result<CandidateTrajectory> {
        self.check_base(j, base)?;
        let indices = self.trajectory_indices(j, base, actions)?;
        let patterns = indices.iter().map(|&i| self.factors[j].codewords[i].clone()).collect();
        Ok(CandidateTrajectory {
            base,
            indices,
            patterns,
        })
    }

    /// Vector-sum materialisation: `e_base + a_1 + .. + a_t` accumulated exactly and
    /// rounded once per step.
    pub fn candidate_trajectory_by_sum(
        &self,
        j: usize,
        base: usize,
        actions: &[ActionId],
    ) -> Result<CandidateTrajectory> {
        self.check_base(j, base)?;
        let f = &self.factors[j];
        let indices = self.trajectory_indices(j, base, actions)?;
        let mut sums: Vec<ExactSum> = f.codewords[base]
            .iter()
            .map(|&x| {
                let mut s = ExactSum::new();
                s.add(x);
                s
            })
            .collect();
        let mut patterns = vec![f.codewords[base].clone()];
        for (t, &a) in actions.iter().enumerate() {
            let mv = self.action_map.moves(a)?[j];
            let v = f.basis.at(indices[t], mv).expect("move on factor topology");
            for (k, s) in sums.iter_mut().enumerate() {
                s.add(v.delta[k]);
                s.add(v.error[k]);
            }
            patterns.push(sums.iter().map(|s| s.value()).collect());
        }
        Ok(CandidateTrajectory {
            base,
            indices,
            patterns,
        })
    }

    fn check_base(&self, j: usize, base: usize) -> Result<()> {
        if j >= self.factors.len() {
            return Err(GcqError::DimensionMismatch {
                context: "factor index",
                expected: self.factors.len(),
                found: j,
            });
        }
        if base >= self.factors[j].len() {
            return Err(GcqError::DimensionMismatch {
                context: "codeword index",
                expected: self.factors[j].len(),
                found: base,
            });
        }
        Ok(())
    }

    /// Serialises the codeword table in the `GCQ1` layout. All factors must share
    /// topology, size and step.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        let table = self.table()?;
        w.write_all(&table.to_bytes())?;
        Ok(())
    }

    pub fn table(&self) -> Result<CodebookTable> {
        let f0 = &self.factors[0];
        for f in &self.factors[1..] {
            if f.topology() != f0.topology() || f.len() != f0.len() || f.dim() != f0.dim() || f.step != f0.step {
                return Err(GcqError::InvalidParameter {
                    name: "codebook",
                    reason: "table export needs identically shaped factors".into(),
                });
            }
        }
        Ok(CodebookTable {
            m: self.m(),
            k: f0.len(),
            d: f0.dim(),
            topology: f0.topology(),
            step: f0.step,
            values: self
                .factors
                .iter()
                .flat_map(|f| f.codewords.iter().flatten().copied())
                .collect(),
        })
    }

    /// Rebuilds a learnable codebook from a stored table. Every factor's rows must be
    /// the roll family of its first row.
    pub fn learnable_from_table(params: &[CannParams], action_map: ActionMap, table: &CodebookTable) -> Result<Self> {
        let steps = vec![table.step; params.len()];
        let mut cb = build_codebook(params, &steps, action_map)?.into_learnable()?;
        let shape_ok = table.m == cb.m()
            && cb
                .factors
                .iter()
                .all(|f| f.len() == table.k && f.dim() == table.d && f.topology() == table.topology);
        if !shape_ok {
            return Err(GcqError::decode(
                "GCQ1",
                "table shape does not match the configured factors",
            ));
        }
        for j in 0..table.m {
            let rows = &table.values[j * table.k * table.d..(j + 1) * table.k * table.d];
            let proto = &rows[..table.d];
            cb.set_prototype(j, proto)?;
            let regenerated: Vec<f64> = cb.factors[j].codewords.iter().flatten().copied().collect();
            if regenerated != rows {
                return Err(GcqError::decode(
                    "GCQ1",
                    format!("factor {j} rows are not rolls of one prototype"),
                ));
            }
        }
        Ok(cb)
    }
}

fn rolled_family(prototype: &[f64], params: &CannParams) -> Vec<Vec<f64>> {
    let n = params.neurons_per_axis;
    (0..params.attractor_count())
        .map(|c| {
            let shift = match params.topology {
                Topology::Ring => (c as i64, 0),
                Topology::Torus => ((c / n) as i64, (c % n) as i64),
            };
            roll_pattern(prototype, params.topology, n, shift)
        })
        .collect()
}

/// Raw codeword table as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookTable {
    pub m: usize,
    pub k: usize,
    pub d: usize,
    pub topology: Topology,
    pub step: usize,
    /// Row-major `m x K x d`.
    pub values: Vec<f64>,
}

pub const CODEBOOK_MAGIC: &[u8; 4] = b"GCQ1";

impl CodebookTable {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + 8 * self.values.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        for v in [self.m, self.k, self.d] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.topology.id());
        out.extend_from_slice(&(self.step as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::bytes::Reader::new(bytes, "GCQ1");
        r.magic(CODEBOOK_MAGIC)?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let topology = Topology::from_id(r.u8()?).ok_or_else(|| GcqError::decode("GCQ1", "unknown topology id"))?;
        let step = r.u32()? as usize;
        if m == 0 || k == 0 || d == 0 {
            return Err(GcqError::decode("GCQ1", "zero dimension"));
        }
        let count = m
            .checked_mul(k)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| GcqError::decode("GCQ1", "dimensions overflow"))?;
        let values = r.f64s(count)?;
        r.finish()?;
        Ok(CodebookTable {
            m,
            k,
            d,
            topology,
            step,
            values,
        })
    }
}
