//! Physical PE fabric, logical reshaping and the serpentine emulator.
//!
//! A `phys_rows x phys_cols` grid is cut into `g` horizontal strips of
//! `rows` PEs each. Strips are chained end to end, alternating direction,
//! so the grid behaves as one logical `rows x (g * phys_cols)` array.
//! Consecutive strips are joined by `rows` vertical turn links at the edge
//! column they share.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical compute fabric of one core plus its replication across the stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub phys_rows: u64,
    pub phys_cols: u64,
    /// Minimum logical row height.
    pub granularity: u64,
    pub freq_hz: f64,
    pub cores_per_pu: u64,
    pub num_pus: u64,
    pub reconfigurable: bool,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            phys_rows: 64,
            phys_cols: 64,
            granularity: 8,
            freq_hz: 8.0e8,
            cores_per_pu: 4,
            num_pus: 16,
            reconfigurable: true,
        }
    }
}

impl ArrayConfig {
    /// Fixed-shape array at the given clock; only its physical shape is legal.
    pub fn fixed(rows: u64, cols: u64, freq_hz: f64) -> Self {
        ArrayConfig {
            phys_rows: rows,
            phys_cols: cols,
            granularity: rows,
            freq_hz,
            reconfigurable: false,
            ..Default::default()
        }
    }

    /// Square 48x48 comparator at 1 GHz.
    pub fn fixed_48x48() -> Self {
        Self::fixed(48, 48, 1.0e9)
    }

    /// Elongated 8x288 comparator at 1 GHz.
    pub fn fixed_8x288() -> Self {
        Self::fixed(8, 288, 1.0e9)
    }

    /// Toy reconfigurable array used by the emulator checks.
    pub fn toy(rows: u64, cols: u64, granularity: u64) -> Self {
        ArrayConfig {
            phys_rows: rows,
            phys_cols: cols,
            granularity,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phys_rows < 1 || self.phys_cols < 1 {
            return Err(Error::invalid("phys_rows", "array dimensions must be at least 1"));
        }
        if self.granularity < 1 || !self.phys_rows.is_multiple_of(self.granularity) {
            return Err(Error::invalid("granularity", "must divide phys_rows"));
        }
        if self.cores_per_pu < 1 || self.num_pus < 1 {
            return Err(Error::invalid("num_pus", "core and PU counts must be at least 1"));
        }
        if self.freq_hz.is_nan() || self.freq_hz <= 0.0 {
            return Err(Error::invalid("freq_hz", "must be positive"));
        }
        Ok(())
    }

    pub fn pes(&self) -> u64 {
        self.phys_rows * self.phys_cols
    }

    pub fn physical_shape(&self) -> LogicalShape {
        LogicalShape {
            rows: self.phys_rows,
            cols: self.phys_cols,
            strips: 1,
        }
    }

    /// Peak MACs per second of the whole stack.
    pub fn peak_macs_per_s(&self) -> f64 {
        (self.num_pus * self.cores_per_pu * self.pes()) as f64 * self.freq_hz
    }
}

/// A logical reshaping of the physical grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LogicalShape {
    pub rows: u64,
    pub cols: u64,
    pub strips: u64,
}

impl std::fmt::Display for LogicalShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Stationary operand class. Weight-stationary is deliberately absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataflow {
    #[serde(rename = "OS")]
    Os,
    #[serde(rename = "IS")]
    Is,
}

impl std::fmt::Display for Dataflow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dataflow::Os => "OS",
            Dataflow::Is => "IS",
        })
    }
}

/// All legal logical shapes, ordered by increasing row count.
pub fn logical_shapes(cfg: &ArrayConfig) -> Vec<LogicalShape> {
    if !cfg.reconfigurable {
        return vec![cfg.physical_shape()];
    }
    (1..=cfg.phys_rows / cfg.granularity)
        .map(|i| i * cfg.granularity)
        .filter(|rows| cfg.phys_rows.is_multiple_of(*rows))
        .map(|rows| {
            let strips = cfg.phys_rows / rows;
            LogicalShape {
                rows,
                cols: strips * cfg.phys_cols,
                strips,
            }
        })
        .collect()
}

/// Smallest legal shape whose row count covers `min(m, phys_rows)`.
pub fn select_logical_shape(m: u64, cfg: &ArrayConfig) -> LogicalShape {
    let need = m.max(1).min(cfg.phys_rows);
    logical_shapes(cfg)
        .into_iter()
        .find(|s| s.rows >= need)
        .unwrap_or_else(|| cfg.physical_shape())
}

/// Horizontal flow direction of a strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strip {
    pub row_start: u64,
    pub row_end: u64,
    pub direction: Direction,
}

/// Physical PE coordinate `(row, col)`.
pub type Pe = (u64, u64);

/// Vertical link joining the last PE of a strip row to the first PE of the
/// same logical row in the next strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnLink {
    pub from: Pe,
    pub to: Pe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightPorts {
    pub left: u64,
    pub right: u64,
}

/// Serpentine layout of a logical shape on the physical grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub phys_rows: u64,
    pub phys_cols: u64,
    pub logical: LogicalShape,
    pub dataflow: Dataflow,
    pub strips: Vec<Strip>,
    pub turn_links: Vec<TurnLink>,
    pub weight_ports: WeightPorts,
}

/// Builds the serpentine mapping of `shape` onto `cfg`'s grid.
pub fn snake_map(cfg: &ArrayConfig, shape: LogicalShape, dataflow: Dataflow) -> Result<MappingPlan> {
    if !logical_shapes(cfg).contains(&shape) {
        return Err(Error::IllegalShape {
            rows: shape.rows,
            cols: shape.cols,
            phys_rows: cfg.phys_rows,
            phys_cols: cfg.phys_cols,
        });
    }
    let strips: Vec<Strip> = (0..shape.strips)
        .map(|s| Strip {
            row_start: s * shape.rows,
            row_end: (s + 1) * shape.rows,
            direction: if s % 2 == 0 {
                Direction::LeftToRight
            } else {
                Direction::RightToLeft
            },
        })
        .collect();

    let mut turn_links = Vec::new();
    for (s, strip) in strips.iter().enumerate().take(strips.len().saturating_sub(1)) {
        let edge = match strip.direction {
            Direction::LeftToRight => cfg.phys_cols - 1,
            Direction::RightToLeft => 0,
        };
        let next = &strips[s + 1];
        for r in 0..shape.rows {
            turn_links.push(TurnLink {
                from: (strip.row_start + r, edge),
                to: (next.row_start + r, edge),
            });
        }
    }

    Ok(MappingPlan {
        phys_rows: cfg.phys_rows,
        phys_cols: cfg.phys_cols,
        logical: shape,
        dataflow,
        strips,
        turn_links,
        weight_ports: WeightPorts {
            left: shape.strips.div_ceil(2),
            right: shape.strips / 2,
        },
    })
}

impl MappingPlan {
    /// Physical PE hosting logical coordinate `(row, col)`.
    pub fn physical(&self, row: u64, col: u64) -> Pe {
        let s = col / self.phys_cols;
        let offset = col % self.phys_cols;
        let pc = if s.is_multiple_of(2) { offset } else { self.phys_cols - 1 - offset };
        (s * self.logical.rows + row, pc)
    }

    /// Logical coordinate hosted by physical PE `(prow, pcol)`.
    pub fn logical_of(&self, pe: Pe) -> (u64, u64) {
        let (prow, pcol) = pe;
        let s = prow / self.logical.rows;
        let offset = if s.is_multiple_of(2) { pcol } else { self.phys_cols - 1 - pcol };
        (prow % self.logical.rows, s * self.phys_cols + offset)
    }

    /// Upstream neighbour along the logical row, derived from strip
    /// directions and turn links alone. `None` marks boundary injection.
    pub fn horizontal_source(&self, pe: Pe) -> Option<Pe> {
        let (prow, pcol) = pe;
        let s = (prow / self.logical.rows) as usize;
        let strip = &self.strips[s];
        let entry_col = match strip.direction {
            Direction::LeftToRight => 0,
            Direction::RightToLeft => self.phys_cols - 1,
        };
        if pcol != entry_col {
            return Some(match strip.direction {
                Direction::LeftToRight => (prow, pcol - 1),
                Direction::RightToLeft => (prow, pcol + 1),
            });
        }
        self.turn_links.iter().find(|l| l.to == pe).map(|l| l.from)
    }

    /// Upstream neighbour along the logical column; `None` at a strip's top
    /// row, where the strip's weight port injects.
    pub fn vertical_source(&self, pe: Pe) -> Option<Pe> {
        let (prow, pcol) = pe;
        (prow % self.logical.rows != 0).then(|| (prow - 1, pcol))
    }

    /// Boundary side that feeds strip `s`.
    pub fn port_side(&self, s: usize) -> Direction {
        self.strips[s].direction
    }
}

/// Dense integer matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> i64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: i64) {
        self.data[r * self.cols + c] = v;
    }

    /// Plain triple-loop product.
    pub fn naive_product(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows);
        Matrix::from_fn(self.rows, rhs.cols, |i, j| {
            let mut acc = 0i64;
            for k in 0..self.cols {
                acc = acc.wrapping_add(self.get(i, k).wrapping_mul(rhs.get(k, j)));
            }
            acc
        })
    }
}

/// Result of one emulated single-tile GEMM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emulation {
    pub c: Matrix,
    pub cycles: u64,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    val: i64,
    /// Temporal index carried with the operand (output column under IS).
    idx: usize,
}

/// Runs one tile PE by PE, cycle by cycle, over the serpentine fabric.
///
/// Under OS the `a` rows stream along logical rows and the `b` columns
/// stream down logical columns into stationary accumulators. Under IS `a`
/// is preloaded into the PEs, `b` streams down logical columns and partial
/// sums travel along logical rows through the turn links.
pub fn emulate(plan: &MappingPlan, a: &Matrix, b: &Matrix) -> Result<Emulation> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let rows = plan.logical.rows as usize;
    let cols = plan.logical.cols as usize;
    let (m, n, k) = (a.rows, b.cols, a.cols);
    let spatial = match plan.dataflow {
        Dataflow::Os => n,
        Dataflow::Is => k,
    };
    if m > rows || spatial > cols || m == 0 || n == 0 || k == 0 {
        return Err(Error::TileTooLarge {
            m,
            spatial,
            rows: plan.logical.rows,
            cols: plan.logical.cols,
        });
    }
    let depth = match plan.dataflow {
        Dataflow::Os => k,
        Dataflow::Is => n,
    };

    let pr = plan.phys_rows as usize;
    let pc = plan.phys_cols as usize;
    let idx = |pe: Pe| pe.0 as usize * pc + pe.1 as usize;
    let npe = pr * pc;

    let mut logical = vec![(0usize, 0usize); npe];
    let mut h_src = vec![None; npe];
    let mut v_src = vec![None; npe];
    for r in 0..pr as u64 {
        for c in 0..pc as u64 {
            let p = idx((r, c));
            let (lr, lc) = plan.logical_of((r, c));
            logical[p] = (lr as usize, lc as usize);
            h_src[p] = plan.horizontal_source((r, c)).map(idx);
            v_src[p] = plan.vertical_source((r, c)).map(idx);
        }
    }

    // Preload: stationary values shift down every physical column, one row
    // per cycle, so the value for row `r` enters at cycle `pr - 1 - r`.
    let mut stationary = vec![0i64; npe];
    let mut cycles = 0u64;
    for t in 0..pr {
        for c in 0..pc {
            for r in (1..pr).rev() {
                stationary[r * pc + c] = stationary[(r - 1) * pc + c];
            }
            let target_row = pr - 1 - t;
            let (lr, lc) = logical[target_row * pc + c];
            stationary[c] = match plan.dataflow {
                Dataflow::Is if lr < m && lc < k => a.get(lr, lc),
                _ => 0,
            };
        }
        cycles += 1;
    }

    let inject_h = |lr: usize, t: usize| -> Option<Token> {
        let step = t.checked_sub(lr).filter(|s| *s < depth)?;
        Some(match plan.dataflow {
            Dataflow::Os => Token {
                val: if lr < m { a.get(lr, step) } else { 0 },
                idx: step,
            },
            Dataflow::Is => Token { val: 0, idx: step },
        })
    };
    let inject_v = |lc: usize, t: usize| -> Option<Token> {
        let step = t.checked_sub(lc).filter(|s| *s < depth)?;
        let val = match plan.dataflow {
            Dataflow::Os if lc < n => b.get(step, lc),
            Dataflow::Is if lc < k => b.get(lc, step),
            _ => 0,
        };
        Some(Token { val, idx: step })
    };

    let mut h_out: Vec<Option<Token>> = vec![None; npe];
    let mut v_out: Vec<Option<Token>> = vec![None; npe];
    let mut acc = vec![0i64; npe];
    let mut macs = vec![0usize; npe];
    let mut c_out = Matrix::zeros(m, n);
    let exits: Vec<usize> = (0..rows as u64)
        .map(|r| idx(plan.physical(r, plan.logical.cols - 1)))
        .collect();
    let mut captured = 0usize;
    let limit = depth + rows + cols + 4;

    for t in 0.. {
        if t > limit {
            unreachable!("emulation failed to drain");
        }
        // Output buffer capture of the previous cycle's row exits.
        if plan.dataflow == Dataflow::Is {
            for (lr, &p) in exits.iter().enumerate() {
                if let Some(tok) = h_out[p] {
                    if lr < m {
                        c_out.set(lr, tok.idx, tok.val);
                    }
                    captured += 1;
                }
            }
            if captured == rows * depth {
                cycles += t as u64 + 1;
                break;
            }
        } else if macs.iter().all(|&c| c == depth) {
            // Accumulators are written back over the bottom-boundary paths.
            for p in 0..npe {
                let (lr, lc) = logical[p];
                if lr < m && lc < n {
                    c_out.set(lr, lc, acc[p]);
                }
            }
            cycles += t as u64 + 1;
            break;
        }

        let mut next_h = vec![None; npe];
        let mut next_v = vec![None; npe];
        for p in 0..npe {
            let (lr, lc) = logical[p];
            let in_h = match h_src[p] {
                Some(q) => h_out[q],
                None => inject_h(lr, t),
            };
            let in_v = match v_src[p] {
                Some(q) => v_out[q],
                None => inject_v(lc, t),
            };
            match (in_h, in_v) {
                (Some(h), Some(v)) => {
                    debug_assert_eq!(h.idx, v.idx, "operand skew mismatch");
                    match plan.dataflow {
                        Dataflow::Os => {
                            acc[p] = acc[p].wrapping_add(h.val.wrapping_mul(v.val));
                            macs[p] += 1;
                            next_h[p] = Some(h);
                        }
                        Dataflow::Is => {
                            next_h[p] = Some(Token {
                                val: h.val.wrapping_add(stationary[p].wrapping_mul(v.val)),
                                idx: h.idx,
                            });
                        }
                    }
                    next_v[p] = Some(v);
                }
                (None, None) => {}
                _ => unreachable!("operands arrived out of step"),
            }
        }
        h_out = next_h;
        v_out = next_v;
    }

    Ok(Emulation { c: c_out, cycles })
}
