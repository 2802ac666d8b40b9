//! Block Hankel matrices of a single recorded trajectory.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Recorded inputs and outputs, one column per sample.
///
/// Sample `k` of `y` is the measurement taken before `u(k)` is applied, so `y(0)` is
/// the initial output and `y(k+1)` responds to `u(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    pub u: Matrix,
    pub y: Matrix,
}

impl TrajectoryData {
    pub fn new(u: Matrix, y: Matrix) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::Dimension(format!(
                "trajectory has {} input samples but {} output samples",
                u.ncols(),
                y.ncols()
            )));
        }
        if u.nrows() == 0 || y.nrows() == 0 {
            return Err(Error::Dimension("trajectory needs at least one input and one output channel".into()));
        }
        if u.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("trajectory contains non-finite samples".into()));
        }
        Ok(Self { u, y })
    }

    pub fn from_siso(u: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_row_slice(1, u.len(), u), Matrix::from_row_slice(1, y.len(), y))
    }

    /// Prepends `n` samples of zero input with the output held at `y(0)`.
    ///
    /// Valid when the experiment starts from rest at an equilibrium whose holding
    /// input is zero: the system then produced exactly these samples before the
    /// recording began, and they supply the past window of the first columns.
    pub fn with_rest_prefix(&self, n: usize) -> Self {
        let s = self.len();
        let mut u = Matrix::zeros(self.m(), s + n);
        u.columns_mut(n, s).copy_from(&self.u);
        let mut y = Matrix::zeros(self.p(), s + n);
        for k in 0..n {
            y.set_column(k, &self.y.column(0));
        }
        y.columns_mut(n, s).copy_from(&self.y);
        Self { u, y }
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// CSV with header `k,u0..,y0..` (or `k,u,y` for one channel each).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", self.header().join(","))?;
        for k in 0..self.len() {
            write!(w, "{k}")?;
            for v in self.u.column(k).iter().chain(self.y.column(k).iter()) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["k".to_string()];
        let name = |base: &str, n: usize, i: usize| {
            if n == 1 {
                base.to_string()
            } else {
                format!("{base}{i}")
            }
        };
        h.extend((0..self.m()).map(|i| name("u", self.m(), i)));
        h.extend((0..self.p()).map(|i| name("y", self.p(), i)));
        h
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"k") {
            return Err(Error::Parse(format!("{}: first column must be k", path.display())));
        }
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        let p = cols.iter().filter(|c| c.starts_with('y')).count();
        if m == 0 || p == 0 || m + p + 1 != cols.len() {
            return Err(Error::Parse(format!("{}: unexpected header {header:?}", path.display())));
        }
        let mut u = Vec::new();
        let mut y = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), ln + 2)))?;
            if vals.len() != m + p {
                return Err(Error::Parse(format!("{} line {}: wrong field count", path.display(), ln + 2)));
            }
            u.extend_from_slice(&vals[..m]);
            y.extend_from_slice(&vals[m..]);
        }
        let s = u.len() / m;
        Self::new(Matrix::from_column_slice(m, s, &u), Matrix::from_column_slice(p, s, &y))
    }
}

/// Row layout of the regressor `col(u_ini, y_ini, u_future)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressorLayout {
    pub m: usize,
    pub p: usize,
    pub t_ini: usize,
    pub horizon: usize,
}

impl RegressorLayout {
    pub fn new(m: usize, p: usize, t_ini: usize, horizon: usize) -> Result<Self> {
        if m == 0 || p == 0 || t_ini == 0 || horizon == 0 {
            return Err(Error::Dimension(format!(
                "regressor needs m, p, t_ini, horizon >= 1 (got {m}, {p}, {t_ini}, {horizon})"
            )));
        }
        Ok(Self { m, p, t_ini, horizon })
    }

    pub fn dim(&self) -> usize {
        (self.m + self.p) * self.t_ini + self.m * self.horizon
    }

    /// First row of the future-input block.
    pub fn future_offset(&self) -> usize {
        (self.m + self.p) * self.t_ini
    }

    pub fn output_dim(&self) -> usize {
        self.p * self.horizon
    }

    /// Smallest column count for which the regressor matrix can have full row rank.
    pub fn min_columns(&self) -> usize {
        self.dim()
    }

    pub fn build(&self, u_ini: &[f64], y_ini: &[f64], u_future: &[f64]) -> Result<Vector> {
        let (ui, yi, uf) = (self.m * self.t_ini, self.p * self.t_ini, self.m * self.horizon);
        if u_ini.len() != ui || y_ini.len() != yi || u_future.len() != uf {
            return Err(Error::Dimension(format!(
                "regressor windows have lengths ({}, {}, {}), expected ({ui}, {yi}, {uf})",
                u_ini.len(),
                y_ini.len(),
                u_future.len()
            )));
        }
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(u_ini);
        v.extend_from_slice(y_ini);
        v.extend_from_slice(u_future);
        Ok(Vector::from_vec(v))
    }
}

/// Concatenates `u_ini`, `y_ini` and `u_future` for the given window lengths.
pub fn build_online_regressor(
    layout: &RegressorLayout,
    u_ini: &[f64],
    y_ini: &[f64],
    u_future: &[f64],
) -> Result<Vector> {
    layout.build(u_ini, y_ini, u_future)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub layout: RegressorLayout,
    pub u_p: Matrix,
    pub y_p: Matrix,
    pub u_f: Matrix,
    pub y_f: Matrix,
    /// `[U_p; Y_p; U_f]`.
    pub h: Matrix,
}

impl HankelSet {
    pub fn columns(&self) -> usize {
        self.h.ncols()
    }

    /// Writes `h` then `y_f`, each preceded by a `# name rows cols` line, rows
    /// comma-separated.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (name, m) in [("H", &self.h), ("Y_f", &self.y_f)] {
            writeln!(w, "# {name} {} {}", m.nrows(), m.ncols())?;
            for r in 0..m.nrows() {
                let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn block_hankel(x: &Matrix, first: usize, depth: usize, cols: usize) -> Matrix {
    let ch = x.nrows();
    Matrix::from_fn(ch * depth, cols, |r, j| x[(r % ch, first + j + r / ch)])
}

/// Builds `U_p`, `Y_p`, `U_f`, `Y_f` with `T = len - t_ini - horizon` columns.
///
/// Column `j` uses `u(j .. j+t_ini+horizon-1)` and `y(j+1 .. j+t_ini+horizon)`.
pub fn build_hankel(d: &TrajectoryData, t_ini: usize, horizon: usize) -> Result<HankelSet> {
    let layout = RegressorLayout::new(d.m(), d.p(), t_ini, horizon)?;
    let need = t_ini + horizon + 1;
    if d.len() < need {
        return Err(Error::Dimension(format!(
            "trajectory has {} samples, at least {need} needed for t_ini={t_ini}, horizon={horizon} ({} short)",
            d.len(),
            need - d.len()
        )));
    }
    let t = d.len() - t_ini - horizon;
    let u_p = block_hankel(&d.u, 0, t_ini, t);
    let y_p = block_hankel(&d.y, 1, t_ini, t);
    let u_f = block_hankel(&d.u, t_ini, horizon, t);
    let y_f = block_hankel(&d.y, t_ini + 1, horizon, t);
    let mut h = Matrix::zeros(layout.dim(), t);
    h.rows_mut(0, u_p.nrows()).copy_from(&u_p);
    h.rows_mut(u_p.nrows(), y_p.nrows()).copy_from(&y_p);
    h.rows_mut(layout.future_offset(), u_f.nrows()).copy_from(&u_f);
    Ok(HankelSet {
        layout,
        u_p,
        y_p,
        u_f,
        y_f,
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn four_sample_example() {
        let d = TrajectoryData::from_siso(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        let hs = build_hankel(&d, 1, 1).unwrap();
        assert_eq!(hs.u_p, row(&[1.0, 2.0]));
        assert_eq!(hs.y_p, row(&[20.0, 30.0]));
        assert_eq!(hs.u_f, row(&[2.0, 3.0]));
        assert_eq!(hs.y_f, row(&[30.0, 40.0]));
        assert_eq!(hs.h, Matrix::from_row_slice(3, 2, &[1.0, 2.0, 20.0, 30.0, 2.0, 3.0]));
    }

    #[test]
    fn identification_dimensions() {
        let s: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.1).sin()).collect();
        let d = TrajectoryData::from_siso(&s, &s).unwrap();
        assert_eq!(build_hankel(&d, 5, 10).unwrap().columns(), 985);
        let hs = build_hankel(&d.with_rest_prefix(5), 5, 10).unwrap();
        assert_eq!(hs.h.shape(), (20, 990));
        assert_eq!(hs.y_f.shape(), (10, 990));
    }

    #[test]
    fn minimal_window() {
        let d = TrajectoryData::from_siso(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(build_hankel(&d, 1, 1).unwrap().columns(), 1);
        let short = TrajectoryData::from_siso(&[1.0, 2.0], &[4.0, 5.0]).unwrap();
        assert!(matches!(build_hankel(&short, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn rest_prefix_layout() {
        let d = TrajectoryData::from_siso(&[1.0, 2.0], &[0.5, 3.0]).unwrap();
        let e = d.with_rest_prefix(2);
        assert_eq!(e.u, row(&[0.0, 0.0, 1.0, 2.0]));
        assert_eq!(e.y, row(&[0.5, 0.5, 0.5, 3.0]));
    }

    #[test]
    fn regressor_examples() {
        let l = RegressorLayout::new(1, 1, 1, 1).unwrap();
        assert_eq!(l.build(&[2.0], &[3.0], &[5.0]).unwrap().as_slice(), &[2.0, 3.0, 5.0]);
        assert!(RegressorLayout::new(1, 1, 1, 0).is_err());
        assert!(l.build(&[2.0], &[3.0], &[5.0, 6.0]).is_err());
    }

    #[test]
    fn mismatched_trajectory_rejected() {
        assert!(TrajectoryData::from_siso(&[1.0, 2.0], &[1.0]).is_err());
        assert!(TrajectoryData::from_siso(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = TrajectoryData::new(
            Matrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -1.0, 1.0 / 3.0, 2.5]),
            Matrix::from_row_slice(1, 3, &[7.0, 8.125, -9.0]),
        )
        .unwrap();
        d.write_csv(&path).unwrap();
        assert_eq!(TrajectoryData::read_csv(&path).unwrap(), d);
    }

    fn traj(m: usize, p: usize, len: usize) -> impl Strategy<Value = TrajectoryData> {
        (
            prop::collection::vec(-5.0f64..5.0, m * len),
            prop::collection::vec(-5.0f64..5.0, p * len),
        )
            .prop_map(move |(u, y)| {
                TrajectoryData::new(Matrix::from_vec(m, len, u), Matrix::from_vec(p, len, y)).unwrap()
            })
    }

    proptest! {
        #[test]
        fn hankel_shift_structure(
            (d, t_ini, n) in (1usize..3, 1usize..3, 1usize..4, 1usize..5)
                .prop_flat_map(|(m, p, t_ini, n)| (traj(m, p, t_ini + n + 8), Just(t_ini), Just(n)))
        ) {
            let hs = build_hankel(&d, t_ini, n).unwrap();
            for (blk, ch) in [(&hs.u_p, d.m()), (&hs.y_p, d.p()), (&hs.u_f, d.m()), (&hs.y_f, d.p())] {
                for r in 0..blk.nrows() - ch {
                    for j in 0..blk.ncols() - 1 {
                        prop_assert_eq!(blk[(r, j + 1)], blk[(r + ch, j)]);
                    }
                }
            }
        }

        #[test]
        fn columns_are_trajectory_slices(
            (d, t_ini, n) in (1usize..3, 1usize..3, 1usize..4, 1usize..5)
                .prop_flat_map(|(m, p, t_ini, n)| (traj(m, p, t_ini + n + 6), Just(t_ini), Just(n)))
        ) {
            let hs = build_hankel(&d, t_ini, n).unwrap();
            prop_assert_eq!(hs.columns(), d.len() - t_ini - n);
            let (m, p) = (d.m(), d.p());
            for j in 0..hs.columns() {
                let u_ini: Vec<f64> = (j..j + t_ini).flat_map(|k| d.u.column(k).iter().copied().collect::<Vec<_>>()).collect();
                let y_ini: Vec<f64> = (j + 1..j + 1 + t_ini).flat_map(|k| d.y.column(k).iter().copied().collect::<Vec<_>>()).collect();
                let u_fut: Vec<f64> = (j + t_ini..j + t_ini + n).flat_map(|k| d.u.column(k).iter().copied().collect::<Vec<_>>()).collect();
                let y_fut: Vec<f64> = (j + t_ini + 1..j + t_ini + n + 1).flat_map(|k| d.y.column(k).iter().copied().collect::<Vec<_>>()).collect();
                let reg = hs.layout.build(&u_ini, &y_ini, &u_fut).unwrap();
                prop_assert_eq!(hs.h.column(j).clone_owned(), reg);
                prop_assert_eq!(hs.y_f.column(j).iter().copied().collect::<Vec<_>>(), y_fut);
                prop_assert_eq!(hs.layout.dim(), (m + p) * t_ini + m * n);
            }
        }
    }
}
