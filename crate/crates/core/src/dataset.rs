//! Longitudinal vertex measurements, visit metadata and mesh adjacency.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{DiveError, Result};

/// One observation row: a visit of a subject at a given age.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub subject: u64,
    pub visit: u64,
    pub age: f64,
}

/// Undirected mesh graph stored as sorted neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Builds from neighbour lists, rejecting self-loops, out-of-range
    /// indices and asymmetric lists.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (l, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if let Some(&bad) = list.iter().find(|&&m| m >= n) {
                return Err(DiveError::InvalidDataset(format!(
                    "vertex {l} has out-of-range neighbour {bad}"
                )));
            }
            if list.binary_search(&l).is_ok() {
                return Err(DiveError::InvalidDataset(format!("self-loop at vertex {l}")));
            }
        }
        for (l, list) in neighbors.iter().enumerate() {
            for &m in list {
                if neighbors[m].binary_search(&l).is_err() {
                    return Err(DiveError::InvalidDataset(format!(
                        "asymmetric adjacency: {l} -> {m} without {m} -> {l}"
                    )));
                }
            }
        }
        Ok(Self { neighbors })
    }

    /// Builds from an undirected edge list. Each edge is inserted in both
    /// directions; the second value counts edges whose reverse was absent
    /// from the input.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<(Self, usize)> {
        let mut directed = std::collections::BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(DiveError::InvalidDataset(format!(
                    "edge ({a}, {b}) out of range for {n} vertices"
                )));
            }
            if a == b {
                return Err(DiveError::InvalidDataset(format!("self-loop at vertex {a}")));
            }
            directed.insert((a, b));
        }
        let missing_reverse = directed
            .iter()
            .filter(|&&(a, b)| !directed.contains(&(b, a)))
            .count();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &directed {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Ok((Self::from_neighbors(neighbors)?, missing_reverse))
    }

    /// 4-connected grid of `width × height` vertices, row-major.
    pub fn grid(width: usize, height: usize) -> Self {
        let mut neighbors = vec![Vec::new(); width * height];
        for y in 0..height {
            for x in 0..width {
                let l = y * width + x;
                if x + 1 < width {
                    neighbors[l].push(l + 1);
                    neighbors[l + 1].push(l);
                }
                if y + 1 < height {
                    neighbors[l].push(l + width);
                    neighbors[l + width].push(l);
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, l: usize) -> &[usize] {
        &self.neighbors[l]
    }

    pub fn degree(&self, l: usize) -> usize {
        self.neighbors[l].len()
    }

    /// Undirected edges `(a, b)` with `a < b`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, list) in self.neighbors.iter().enumerate() {
            for &b in list {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        if self.neighbors.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(l) = stack.pop() {
            for &m in &self.neighbors[l] {
                if !seen[m] {
                    seen[m] = true;
                    count += 1;
                    stack.push(m);
                }
            }
        }
        count == self.len()
    }
}

/// Biomarker values (observation row × vertex) with visit metadata.
///
/// Subjects are indexed densely in ascending order of their external id;
/// each subject's rows are ordered by age, so the first is the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    rows: Vec<Observation>,
    adjacency: Adjacency,
    subject_ids: Vec<u64>,
    subject_rows: Vec<Vec<usize>>,
    row_subject: Vec<usize>,
}

impl Dataset {
    pub fn new(values: Array2<f64>, rows: Vec<Observation>, adjacency: Adjacency) -> Result<Self> {
        if values.nrows() != rows.len() {
            return Err(DiveError::InvalidDataset(format!(
                "value matrix has {} rows but {} observations were given",
                values.nrows(),
                rows.len()
            )));
        }
        if values.ncols() != adjacency.len() {
            return Err(DiveError::InvalidDataset(format!(
                "value matrix has {} columns but the mesh has {} vertices",
                values.ncols(),
                adjacency.len()
            )));
        }
        if values.ncols() == 0 || rows.is_empty() {
            return Err(DiveError::InvalidDataset("empty dataset".into()));
        }
        if let Some(((r, l), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DiveError::InvalidDataset(format!(
                "non-finite value {v} at row {r}, vertex {l}"
            )));
        }
        if let Some((r, o)) = rows.iter().enumerate().find(|(_, o)| !o.age.is_finite()) {
            return Err(DiveError::InvalidDataset(format!(
                "non-finite age {} at row {r}",
                o.age
            )));
        }

        let mut by_subject: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (r, o) in rows.iter().enumerate() {
            by_subject.entry(o.subject).or_default().push(r);
        }
        let mut subject_ids = Vec::with_capacity(by_subject.len());
        let mut subject_rows = Vec::with_capacity(by_subject.len());
        let mut row_subject = vec![0; rows.len()];
        for (i, (id, mut idx)) in by_subject.into_iter().enumerate() {
            idx.sort_by(|&a, &b| {
                rows[a]
                    .age
                    .total_cmp(&rows[b].age)
                    .then(rows[a].visit.cmp(&rows[b].visit))
            });
            let mut visits: Vec<u64> = idx.iter().map(|&r| rows[r].visit).collect();
            visits.sort_unstable();
            if visits.windows(2).any(|w| w[0] == w[1]) {
                return Err(DiveError::InvalidDataset(format!(
                    "duplicate visit id for subject {id}"
                )));
            }
            for &r in &idx {
                row_subject[r] = i;
            }
            subject_ids.push(id);
            subject_rows.push(idx);
        }

        Ok(Self {
            values,
            rows,
            adjacency,
            subject_ids,
            subject_rows,
            row_subject,
        })
    }

    /// Rows `(r, l)` hold the value of vertex `l` at observation `r`.
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn age(&self, r: usize) -> f64 {
        self.rows[r].age
    }

    pub fn subject_of_row(&self, r: usize) -> usize {
        self.row_subject[r]
    }

    pub fn subject_id(&self, i: usize) -> u64 {
        self.subject_ids[i]
    }

    pub fn subject_ids(&self) -> &[u64] {
        &self.subject_ids
    }

    pub fn subject_index(&self, id: u64) -> Option<usize> {
        self.subject_ids.binary_search(&id).ok()
    }

    /// Row indices of subject `i`, earliest visit first.
    pub fn subject_rows(&self, i: usize) -> &[usize] {
        &self.subject_rows[i]
    }

    pub fn baseline_row(&self, i: usize) -> usize {
        self.subject_rows[i][0]
    }

    pub fn mean_age(&self) -> f64 {
        self.rows.iter().map(|o| o.age).sum::<f64>() / self.rows.len() as f64
    }

    /// Restricts to the given dense subject indices, keeping the mesh.
    pub fn subset(&self, subjects: &[usize]) -> Result<Dataset> {
        let mut keep: Vec<usize> = subjects
            .iter()
            .flat_map(|&i| self.subject_rows[i].iter().copied())
            .collect();
        keep.sort_unstable();
        let values = self.values.select(Axis(0), &keep);
        let rows = keep.iter().map(|&r| self.rows[r]).collect();
        Dataset::new(values, rows, self.adjacency.clone())
    }

    /// Replaces the value matrix, keeping rows and mesh.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Dataset> {
        Dataset::new(values, self.rows.clone(), self.adjacency.clone())
    }
}
