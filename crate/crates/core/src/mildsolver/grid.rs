//! Tabulated functions `u(t, x, v)` on a tensor grid.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, XvaError};

/// Position of a query between two nodes of an axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `0` when the query is clamped to `lo`.
    pub w: f64,
    pub outside: bool,
}

/// Strictly increasing nodes with a fast path for uniform spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    nodes: Vec<f64>,
    #[serde(skip)]
    uniform: Option<(f64, f64)>,
}

impl Axis {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return domain("grid axis needs at least one node");
        }
        if nodes.iter().any(|x| !x.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return domain("grid axis nodes must be finite and strictly increasing");
        }
        Ok(Axis::from_sorted(nodes))
    }

    fn from_sorted(nodes: Vec<f64>) -> Self {
        let uniform = if nodes.len() >= 2 {
            let h = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
            let tol = 1e-12 * h.abs().max(nodes[0].abs());
            nodes
                .iter()
                .enumerate()
                .all(|(i, x)| (x - (nodes[0] + i as f64 * h)).abs() <= tol)
                .then_some((nodes[0], h))
        } else {
            None
        };
        Axis { nodes, uniform }
    }

    /// `n` equally spaced nodes on `[lo, hi]`; a single node sits at `lo`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return domain("grid axis needs at least one node");
        }
        if n == 1 {
            return Axis::new(vec![lo]);
        }
        let h = (hi - lo) / (n - 1) as f64;
        Axis::new((0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * h }).collect())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// `(first node, spacing)` when the nodes are equally spaced.
    pub fn uniform_spacing(&self) -> Option<(f64, f64)> {
        self.uniform
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.nodes[0]
    }

    pub fn last(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    #[inline]
    pub fn bracket(&self, q: f64) -> Bracket {
        let n = self.nodes.len();
        if n == 1 {
            return Bracket {
                lo: 0,
                hi: 0,
                w: 0.0,
                outside: q != self.nodes[0],
            };
        }
        if q <= self.nodes[0] {
            return Bracket {
                lo: 0,
                hi: 0,
                w: 0.0,
                outside: q < self.nodes[0],
            };
        }
        if q >= self.nodes[n - 1] {
            return Bracket {
                lo: n - 1,
                hi: n - 1,
                w: 0.0,
                outside: q > self.nodes[n - 1],
            };
        }
        let lo = match self.uniform {
            Some((x0, h)) => (((q - x0) / h) as usize).min(n - 2),
            None => self.nodes.partition_point(|x| *x <= q) - 1,
        };
        // guard against rounding in the uniform shortcut
        let lo = if q < self.nodes[lo] {
            lo - 1
        } else if q >= self.nodes[lo + 1] && lo + 2 < n {
            lo + 1
        } else {
            lo
        };
        let (a, b) = (self.nodes[lo], self.nodes[lo + 1]);
        Bracket {
            lo,
            hi: lo + 1,
            w: (q - a) / (b - a),
            outside: false,
        }
    }
}

/// `u` tabulated on `t_nodes × x_nodes × v_nodes`, stored with `v` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub t: Axis,
    pub x: Axis,
    pub v: Axis,
    pub values: Vec<f64>,
    /// Monte-Carlo standard error per node, when the values are estimates.
    pub stderr: Option<Vec<f64>>,
}

impl GridFunction {
    pub fn new(t: Axis, x: Axis, v: Axis, values: Vec<f64>) -> Result<Self> {
        if v.first() <= 0.0 {
            return domain("variance nodes must be positive");
        }
        if values.len() != t.len() * x.len() * v.len() {
            return domain(format!(
                "expected {} values, got {}",
                t.len() * x.len() * v.len(),
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|u| !u.is_finite()) {
            return Err(XvaError::NonFinite(i));
        }
        Ok(GridFunction {
            t,
            x,
            v,
            values,
            stderr: None,
        })
    }

    pub fn from_fn(t: Axis, x: Axis, v: Axis, f: impl Fn(f64, f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(t.len() * x.len() * v.len());
        for tt in t.nodes() {
            for xx in x.nodes() {
                for vv in v.nodes() {
                    values.push(f(*tt, *xx, *vv));
                }
            }
        }
        GridFunction::new(t, x, v, values)
    }

    pub fn constant(t: Axis, x: Axis, v: Axis, c: f64) -> Result<Self> {
        GridFunction::from_fn(t, x, v, |_, _, _| c)
    }

    #[inline]
    pub fn index(&self, it: usize, ix: usize, iv: usize) -> usize {
        (it * self.x.len() + ix) * self.v.len() + iv
    }

    #[inline]
    pub fn at(&self, it: usize, ix: usize, iv: usize) -> f64 {
        self.values[self.index(it, ix, iv)]
    }

    pub fn stderr_at(&self, it: usize, ix: usize, iv: usize) -> f64 {
        self.stderr.as_ref().map(|s| s[self.index(it, ix, iv)]).unwrap_or(0.0)
    }

    /// Node coordinates of a flat index.
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let nv = self.v.len();
        let nx = self.x.len();
        (idx / (nx * nv), (idx / nv) % nx, idx % nv)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, u| m.max(u.abs()))
    }

    /// Whether `(x, v)` lies in the hull of the spatial grid.
    #[inline]
    pub fn contains(&self, x: f64, v: f64) -> bool {
        x >= self.x.first() && x <= self.x.last() && v >= self.v.first() && v <= self.v.last()
    }

    /// Trilinear interpolation with flat extrapolation.
    pub fn interpolate(&self, t: f64, x: f64, v: f64) -> f64 {
        self.interpolate_bracketed(self.t.bracket(t), self.x.bracket(x), self.v.bracket(v))
    }

    #[inline]
    pub fn interpolate_bracketed(&self, bt: Bracket, bx: Bracket, bv: Bracket) -> f64 {
        let plane = |it: usize| {
            let row = |ix: usize| {
                let a = self.at(it, ix, bv.lo);
                if bv.w == 0.0 {
                    a
                } else {
                    a + bv.w * (self.at(it, ix, bv.hi) - a)
                }
            };
            let a = row(bx.lo);
            if bx.w == 0.0 {
                a
            } else {
                a + bx.w * (row(bx.hi) - a)
            }
        };
        let a = plane(bt.lo);
        if bt.w == 0.0 {
            a
        } else {
            a + bt.w * (plane(bt.hi) - a)
        }
    }

    /// `max |self − other|` over nodes; both grids must have equal shape.
    pub fn max_abs_diff(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn same_nodes(&self, other: &GridFunction) -> bool {
        self.t == other.t && self.x == other.x && self.v == other.v
    }

    /// CSV with columns `t,x,v,u` and, for estimates, `stderr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        if self.stderr.is_some() {
            writeln!(w, "t,x,v,u,stderr")?;
        } else {
            writeln!(w, "t,x,v,u")?;
        }
        for (it, t) in self.t.nodes().iter().enumerate() {
            for (ix, x) in self.x.nodes().iter().enumerate() {
                for (iv, v) in self.v.nodes().iter().enumerate() {
                    let u = self.at(it, ix, iv);
                    match &self.stderr {
                        Some(s) => writeln!(
                            w,
                            "{t:.16e},{x:.16e},{v:.16e},{u:.16e},{:.16e}",
                            s[self.index(it, ix, iv)]
                        )?,
                        None => writeln!(w, "{t:.16e},{x:.16e},{v:.16e},{u:.16e}")?,
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<GridFunction> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| XvaError::Parse("empty grid file".into()))??;
        let with_se = match header.trim() {
            "t,x,v,u" => false,
            "t,x,v,u,stderr" => true,
            h => return Err(XvaError::Parse(format!("unexpected header {h:?}"))),
        };
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let cols = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| XvaError::Parse(format!("line {}: {e}", n + 2)))?;
            if cols.len() != if with_se { 5 } else { 4 } {
                return Err(XvaError::Parse(format!("line {}: wrong column count", n + 2)));
            }
            rows.push(cols);
        }
        let distinct = |k: usize| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let t = Axis::new(distinct(0)).map_err(|e| XvaError::Parse(e.to_string()))?;
        let x = Axis::new(distinct(1)).map_err(|e| XvaError::Parse(e.to_string()))?;
        let v = Axis::new(distinct(2)).map_err(|e| XvaError::Parse(e.to_string()))?;
        if rows.len() != t.len() * x.len() * v.len() {
            return Err(XvaError::Parse("grid file is not a full tensor grid".into()));
        }
        let values = rows.iter().map(|r| r[3]).collect();
        let mut g = GridFunction::new(t, x, v, values).map_err(|e| XvaError::Parse(e.to_string()))?;
        if with_se {
            g.stderr = Some(rows.iter().map(|r| r[4]).collect());
        }
        Ok(g)
    }

    const MAGIC: &'static [u8; 8] = b"XVAGRID1";

    /// Binary cache: magic, three axis lengths, axis nodes, values, then a
    /// flag byte and the standard errors if present. Little endian.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(Self::MAGIC)?;
        for a in [&self.t, &self.x, &self.v] {
            w.write_all(&(a.len() as u64).to_le_bytes())?;
        }
        for z in self.t.nodes().iter().chain(self.x.nodes()).chain(self.v.nodes()).chain(&self.values) {
            w.write_all(&z.to_le_bytes())?;
        }
        match &self.stderr {
            Some(s) => {
                w.write_all(&[1])?;
                for z in s {
                    w.write_all(&z.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<GridFunction> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(XvaError::Parse("not a grid cache".into()));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let nt = read_u64(&mut r)? as usize;
        let nx = read_u64(&mut r)? as usize;
        let nv = read_u64(&mut r)? as usize;
        let floats = |r: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let parse = |e: XvaError| XvaError::Parse(e.to_string());
        let t = Axis::new(floats(&mut r, nt)?).map_err(parse)?;
        let x = Axis::new(floats(&mut r, nx)?).map_err(parse)?;
        let v = Axis::new(floats(&mut r, nv)?).map_err(parse)?;
        let values = floats(&mut r, nt * nx * nv)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let stderr = if flag[0] == 1 { Some(floats(&mut r, nt * nx * nv)?) } else { None };
        let mut g = GridFunction::new(t, x, v, values).map_err(parse)?;
        g.stderr = stderr;
        Ok(g)
    }
}
