//! Nodal analysis of the crossbar netlist.
//!
//! Each cell `(i, j)` owns a row-side node `A(i,j)` and a column-side node
//! `B(i,j)`:
//!
//! ```text
//! V_i --r_driver-- A(i,0) --r_wire_row-- A(i,1) -- ... -- A(i,cols-1)
//!                    |                     |
//!                 1/g_i0                1/g_i1
//!                    |                     |
//!                  B(i,0)                B(i,1)
//!                    |r_wire_col           |
//!                  B(i+1,0) ...          ...
//!                    |
//!   B(rows-1,j) --r_sense-- ground,   I_j = current through r_sense
//! ```
//!
//! Zero-ohm parasitics are shorts: the nodes they join are merged, and nodes
//! merged with a source or ground become fixed potentials. Unknowns are
//! numbered in cell order, which keeps the nodal matrix banded with
//! half-bandwidth about `2 * cols`.

use crate::crossbar::{CircuitMode, ConductanceTile, CrossbarConfig};
use crate::error::{Error, Result};
use crate::numerics::{SparseSpdSystem, SpdFactor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Potential {
    Free(usize),
    Ground,
    Source(usize),
}

/// Current `g * (V(hi) - V(lo))` contributing to one column's sense current.
#[derive(Debug, Clone, Copy)]
struct Tap {
    hi: usize,
    lo: usize,
    g: f64,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// A factored crossbar network, reusable across input vectors.
pub struct CrossbarCircuit {
    rows: usize,
    cols: usize,
    potential: Vec<Potential>,
    /// (free unknown, conductance, source row) couplings feeding the RHS
    source_couplings: Vec<(usize, f64, usize)>,
    taps: Vec<Vec<Tap>>,
    free_count: usize,
    factor: Option<SpdFactor>,
}

impl CrossbarCircuit {
    pub fn new(tile: &ConductanceTile, cfg: &CrossbarConfig) -> Result<Self> {
        cfg.validate()?;
        let (rows, cols) = (tile.rows(), tile.cols());
        let cells = rows * cols;
        let a = |i: usize, j: usize| 2 * (i * cols + j);
        let b = |i: usize, j: usize| 2 * (i * cols + j) + 1;
        let ground = 2 * cells;
        let source = |i: usize| 2 * cells + 1 + i;
        let total = 2 * cells + 1 + rows;

        let conductance = |r: f64| if r == 0.0 { None } else { Some(1.0 / r) };
        // (p, q, Some(g)) finite element, (p, q, None) short
        let mut edges: Vec<(usize, usize, Option<f64>)> = Vec::with_capacity(4 * cells + rows + cols);
        for i in 0..rows {
            edges.push((source(i), a(i, 0), conductance(cfg.r_driver)));
            for j in 0..cols {
                if j + 1 < cols {
                    edges.push((a(i, j), a(i, j + 1), conductance(cfg.r_wire_row)));
                }
                let g = tile.get(i, j);
                if !(g > 0.0 && g.is_finite()) {
                    return Err(Error::invalid(format!("device ({i}, {j}) has conductance {g}")));
                }
                edges.push((a(i, j), b(i, j), Some(g)));
                if i + 1 < rows {
                    edges.push((b(i, j), b(i + 1, j), conductance(cfg.r_wire_col)));
                }
            }
        }
        for j in 0..cols {
            edges.push((b(rows - 1, j), ground, conductance(cfg.r_sense)));
        }

        let mut uf = UnionFind((0..total).collect());
        for &(p, q, g) in &edges {
            if g.is_none() {
                uf.union(p, q);
            }
        }
        // terminals have the largest indices, so a root is a terminal only
        // if no physical node shares its class; resolve classes explicitly
        let mut class_potential: Vec<Option<Potential>> = vec![None; total];
        let ground_root = uf.find(ground);
        class_potential[ground_root] = Some(Potential::Ground);
        for i in 0..rows {
            let r = uf.find(source(i));
            if class_potential[r].is_some() {
                return Err(Error::invalid("shorted voltage sources in crossbar netlist"));
            }
            class_potential[r] = Some(Potential::Source(i));
        }
        let mut free_count = 0;
        let mut potential = Vec::with_capacity(total);
        for node in 0..total {
            let r = uf.find(node);
            let p = match class_potential[r] {
                Some(p) => p,
                None => {
                    let p = Potential::Free(free_count);
                    free_count += 1;
                    class_potential[r] = Some(p);
                    p
                }
            };
            potential.push(p);
        }

        let mut system = SparseSpdSystem::new(free_count.max(1));
        let mut source_couplings = Vec::new();
        for &(p, q, g) in &edges {
            let Some(g) = g else { continue };
            match (potential[p], potential[q]) {
                (Potential::Free(x), Potential::Free(y)) if x != y => system.stamp(Some(x), Some(y), g),
                (Potential::Free(_), Potential::Free(_)) => {}
                (Potential::Free(x), fixed) | (fixed, Potential::Free(x)) => {
                    system.stamp(Some(x), None, g);
                    if let Potential::Source(i) = fixed {
                        source_couplings.push((x, g, i));
                    }
                }
                _ => {}
            }
        }

        let mut taps = vec![Vec::new(); cols];
        if let Some(g_sense) = conductance(cfg.r_sense) {
            for (j, t) in taps.iter_mut().enumerate() {
                t.push(Tap {
                    hi: b(rows - 1, j),
                    lo: ground,
                    g: g_sense,
                });
            }
        } else {
            // shorted sense: the column current is everything flowing into the
            // column's grounded B nodes through finite elements
            for &(p, q, g) in &edges {
                let Some(g) = g else { continue };
                for (hi, lo) in [(p, q), (q, p)] {
                    let lo_is_column_b = lo < 2 * cells && lo % 2 == 1;
                    if lo_is_column_b && potential[lo] == Potential::Ground && potential[hi] != Potential::Ground {
                        let j = (lo / 2) % cols;
                        taps[j].push(Tap { hi, lo, g });
                    }
                }
            }
        }

        let factor = if free_count > 0 {
            Some(SpdFactor::new(&system, cfg.solver_tol)?)
        } else {
            None
        };
        Ok(CrossbarCircuit {
            rows,
            cols,
            potential,
            source_couplings,
            taps,
            free_count,
            factor,
        })
    }

    /// Number of unknown node voltages after merging shorts.
    pub fn unknowns(&self) -> usize {
        self.free_count
    }

    /// Column currents for row input voltages `v`.
    pub fn column_currents(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape(format!(
                "crossbar with {} rows driven by {} voltages",
                self.rows,
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite input voltage"));
        }
        let x = match &self.factor {
            Some(f) => {
                let mut rhs = vec![0.0; self.free_count];
                for &(k, g, i) in &self.source_couplings {
                    rhs[k] += g * v[i];
                }
                f.solve(&rhs)?
            }
            None => Vec::new(),
        };
        let volt = |node: usize| match self.potential[node] {
            Potential::Free(k) => x[k],
            Potential::Ground => 0.0,
            Potential::Source(i) => v[i],
        };
        Ok(self
            .taps
            .iter()
            .map(|taps| taps.iter().map(|t| t.g * (volt(t.hi) - volt(t.lo))).sum())
            .collect())
    }

    /// `G_eff(i, j)`: column-`j` current per volt with only row `i` driven.
    pub fn effective_conductance(&self, v_read: f64) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let mut v = vec![0.0; self.rows];
        for i in 0..self.rows {
            v[i] = v_read;
            let currents = self.column_currents(&v)?;
            v[i] = 0.0;
            for (j, c) in currents.into_iter().enumerate() {
                out.set2(i, j, c / v_read);
            }
        }
        Ok(out)
    }
}

fn ideal_currents(tile: &ConductanceTile, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (tile.rows(), tile.cols());
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for (j, o) in out.iter_mut().enumerate() {
            *o += tile.get(i, j) * v[i];
        }
    }
    out
}

/// Column currents of the tile for row voltages `v` under `cfg.circuit_mode`.
pub fn solve_crossbar(tile: &ConductanceTile, cfg: &CrossbarConfig, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != tile.rows() {
        return Err(Error::shape(format!(
            "crossbar with {} rows driven by {} voltages",
            tile.rows(),
            v.len()
        )));
    }
    match cfg.circuit_mode {
        CircuitMode::Ideal => Ok(ideal_currents(tile, v)),
        CircuitMode::Nodal => CrossbarCircuit::new(tile, cfg)?.column_currents(v),
        CircuitMode::Approx => {
            let g = approximate_nonideal_conductance(tile, cfg);
            let t = ConductanceTile::dense(g)?;
            Ok(ideal_currents(&t, v))
        }
    }
}

/// Effective conductance matrix from one-hot nodal solves at `v_read`.
///
/// The network is linear, so `solve_crossbar(v) == G_eff^T v` for every `v`.
pub fn extract_effective_conductance(tile: &ConductanceTile, cfg: &CrossbarConfig) -> Result<Tensor> {
    CrossbarCircuit::new(tile, cfg)?.effective_conductance(cfg.v_read)
}

/// First-order estimate that adds the series parasitic path of each cell:
/// `1 / (1/g + r_driver + j*r_wire_row + (rows - i + 1)*r_wire_col + r_sense)`
/// with 1-based `i, j`. Ignores current sharing, so it under-estimates
/// IR drop on dense tiles.
pub fn approximate_nonideal_conductance(tile: &ConductanceTile, cfg: &CrossbarConfig) -> Tensor {
    let (rows, cols) = (tile.rows(), tile.cols());
    let mut out = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        for j in 0..cols {
            let g = tile.get(i, j);
            let series =
                cfg.r_driver + (j + 1) as f64 * cfg.r_wire_row + (rows - i) as f64 * cfg.r_wire_col + cfg.r_sense;
            let v = if series == 0.0 { g } else { 1.0 / (1.0 / g + series) };
            out.set2(i, j, v);
        }
    }
    out
}

/// Effective conductances for the configured circuit mode.
pub fn effective_conductance(tile: &ConductanceTile, cfg: &CrossbarConfig) -> Result<Tensor> {
    match cfg.circuit_mode {
        CircuitMode::Ideal => Ok(tile.values().clone()),
        CircuitMode::Nodal => extract_effective_conductance(tile, cfg),
        CircuitMode::Approx => Ok(approximate_nonideal_conductance(tile, cfg)),
    }
}
