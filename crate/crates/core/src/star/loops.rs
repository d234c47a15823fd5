use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplication table of a finite magma on `0..n`: `table[x][y] = x * y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct LoopTable {
    table: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    table: Vec<Vec<usize>>,
}

impl TryFrom<RawTable> for LoopTable {
    type Error = Error;
    fn try_from(r: RawTable) -> Result<Self> {
        LoopTable::new(r.table)
    }
}

impl From<LoopTable> for RawTable {
    fn from(t: LoopTable) -> Self {
        RawTable { table: t.table }
    }
}

/// Oriented Fano-plane lines `(i, j, k)` with `e_i e_j = e_k`.
pub const FANO_TRIPLES: [(usize, usize, usize); 7] =
    [(1, 2, 3), (1, 4, 5), (1, 7, 6), (2, 4, 6), (2, 5, 7), (3, 4, 7), (3, 6, 5)];

impl LoopTable {
    /// Rejects non-square tables and entries outside `0..n`.
    pub fn new(table: Vec<Vec<usize>>) -> Result<Self> {
        let n = table.len();
        if n == 0 {
            return Err(Error::invalid("empty multiplication table"));
        }
        for (i, row) in table.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if let Some(v) = row.iter().find(|&&v| v >= n) {
                return Err(Error::invalid(format!("row {i}: entry {v} is not an element (table is not closed)")));
            }
        }
        Ok(LoopTable { table })
    }

    pub fn order(&self) -> usize {
        self.table.len()
    }

    pub fn mul(&self, x: usize, y: usize) -> usize {
        self.table[x][y]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.table
    }

    pub fn is_latin(&self) -> bool {
        let n = self.order();
        let mut ok = true;
        for i in 0..n {
            let mut row = vec![false; n];
            let mut col = vec![false; n];
            for j in 0..n {
                row[self.table[i][j]] = true;
                col[self.table[j][i]] = true;
            }
            ok &= row.iter().all(|&b| b) && col.iter().all(|&b| b);
        }
        ok
    }

    pub fn is_associative(&self) -> bool {
        let n = self.order();
        (0..n).all(|x| (0..n).all(|y| (0..n).all(|z| self.mul(self.mul(x, y), z) == self.mul(x, self.mul(y, z)))))
    }

    pub fn cyclic(n: usize) -> Self {
        LoopTable {
            table: (0..n).map(|i| (0..n).map(|j| (i + j) % n).collect()).collect(),
        }
    }

    /// Symmetries of the regular `n`-gon (order `2n`): element `r^i s^f` is
    /// encoded as `i + n f`.
    pub fn dihedral(n: usize) -> Self {
        let decode = |x: usize| (x % n, x / n);
        let table = (0..2 * n)
            .map(|a| {
                (0..2 * n)
                    .map(|b| {
                        let (i, f) = decode(a);
                        let (j, g) = decode(b);
                        // r^i s^f r^j s^g = r^(i +- j) s^(f+g)
                        let k = if f == 0 { (i + j) % n } else { (i + n - j) % n };
                        k + n * ((f + g) % 2)
                    })
                    .collect()
            })
            .collect();
        LoopTable { table }
    }

    /// Quaternion group `{+-1, +-i, +-j, +-k}`.
    pub fn quaternion() -> Self {
        signed_unit_table(4, |a, b| {
            // 1, i, j, k
            const T: [[(i8, usize); 4]; 4] = [
                [(1, 0), (1, 1), (1, 2), (1, 3)],
                [(1, 1), (-1, 0), (1, 3), (-1, 2)],
                [(1, 2), (-1, 3), (-1, 0), (1, 1)],
                [(1, 3), (1, 2), (-1, 1), (-1, 0)],
            ];
            T[a][b]
        })
    }

    /// Direct product; `(x, y)` is encoded as `x * |b| + y`.
    pub fn product(a: &LoopTable, b: &LoopTable) -> Self {
        let (na, nb) = (a.order(), b.order());
        let table = (0..na * nb)
            .map(|u| (0..na * nb).map(|v| a.mul(u / nb, v / nb) * nb + b.mul(u % nb, v % nb)).collect())
            .collect();
        LoopTable { table }
    }

    /// The 16 unit octonions `+-e_0 .. +-e_7` with signs from the oriented
    /// Fano plane. Element `2 i` is `+e_i`, `2 i + 1` is `-e_i`.
    pub fn octonion_units() -> Self {
        signed_unit_table(8, octonion_basis_product)
    }

    /// Random Latin square of order `n` from backtracking over shuffled
    /// symbols (not uniform over all Latin squares).
    pub fn random_latin<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut grid = vec![vec![usize::MAX; n]; n];
        fill_latin(&mut grid, 0, n, rng);
        LoopTable { table: grid }
    }

    /// One representative of every group of order at most 8.
    pub fn groups_up_to_8() -> Vec<(String, LoopTable)> {
        let mut out: Vec<(String, LoopTable)> = (1..=8).map(|n| (format!("C{n}"), LoopTable::cyclic(n))).collect();
        out.push(("C2xC2".into(), LoopTable::product(&LoopTable::cyclic(2), &LoopTable::cyclic(2))));
        out.push(("S3".into(), LoopTable::dihedral(3)));
        out.push(("C4xC2".into(), LoopTable::product(&LoopTable::cyclic(4), &LoopTable::cyclic(2))));
        let c2c2 = LoopTable::product(&LoopTable::cyclic(2), &LoopTable::cyclic(2));
        out.push(("C2xC2xC2".into(), LoopTable::product(&c2c2, &LoopTable::cyclic(2))));
        out.push(("D4".into(), LoopTable::dihedral(4)));
        out.push(("Q8".into(), LoopTable::quaternion()));
        out
    }
}

/// `e_a e_b = sign * e_c` for the octonion basis.
pub fn octonion_basis_product(a: usize, b: usize) -> (i8, usize) {
    if a == 0 {
        return (1, b);
    }
    if b == 0 {
        return (1, a);
    }
    if a == b {
        return (-1, 0);
    }
    for &(i, j, k) in &FANO_TRIPLES {
        for (x, y, z) in [(i, j, k), (j, k, i), (k, i, j)] {
            if (a, b) == (x, y) {
                return (1, z);
            }
            if (a, b) == (y, x) {
                return (-1, z);
            }
        }
    }
    unreachable!("every pair of distinct imaginary units lies on one Fano line")
}

fn signed_unit_table(units: usize, basis: impl Fn(usize, usize) -> (i8, usize)) -> LoopTable {
    let n = 2 * units;
    let table = (0..n)
        .map(|x| {
            (0..n)
                .map(|y| {
                    let (s, c) = basis(x / 2, y / 2);
                    let neg = (x % 2 == 1) ^ (y % 2 == 1) ^ (s < 0);
                    2 * c + usize::from(neg)
                })
                .collect()
        })
        .collect();
    LoopTable { table }
}

fn fill_latin<R: Rng + ?Sized>(grid: &mut [Vec<usize>], cell: usize, n: usize, rng: &mut R) -> bool {
    if cell == n * n {
        return true;
    }
    let (r, c) = (cell / n, cell % n);
    let mut symbols: Vec<usize> = (0..n).collect();
    symbols.shuffle(rng);
    for s in symbols {
        let clash = (0..c).any(|j| grid[r][j] == s) || (0..r).any(|i| grid[i][c] == s);
        if !clash {
            grid[r][c] = s;
            if fill_latin(grid, cell + 1, n, rng) {
                return true;
            }
        }
    }
    grid[r][c] = usize::MAX;
    false
}

/// Fraction of triples `(x, y, z)` violating `x(y(xz)) = ((xy)x)z`.
pub fn moufang_table_residual(t: &LoopTable) -> f64 {
    let n = t.order();
    let mut bad = 0usize;
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let lhs = t.mul(x, t.mul(y, t.mul(x, z)));
                let rhs = t.mul(t.mul(t.mul(x, y), x), z);
                bad += usize::from(lhs != rhs);
            }
        }
    }
    bad as f64 / (n * n * n) as f64
}
