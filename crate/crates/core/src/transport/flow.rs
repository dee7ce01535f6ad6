//! Successive shortest paths with node potentials for balanced
//! transportation problems with real-valued supplies.
//!
//! Rows are supply nodes, columns demand nodes; forward arcs are
//! uncapacitated and listed per row. Dijkstra runs from every row with
//! remaining supply and stops at the first column with remaining demand.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Transportation {
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
    /// Forward arcs `(column, cost)` per row, costs >= 0.
    pub arcs: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    dist: f64,
    node: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // Reversed: BinaryHeap is a max-heap; lowest (dist, node) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

#[derive(Debug, Clone, Copy)]
enum Pred {
    None,
    /// Reached column via forward arc from this row.
    Forward(usize),
    /// Reached row via a backward (flow-cancelling) arc from this column.
    Backward(usize),
}

/// Positive flows `(row, column, amount)` sorted by `(row, column)`.
pub(crate) type Flows = Vec<(usize, usize, f64)>;

impl Transportation {
    pub fn solve(&self) -> Result<Flows> {
        let rows = self.supply.len();
        let cols = self.demand.len();
        let nodes = rows + cols;
        let scale = self
            .supply
            .iter()
            .sum::<f64>()
            .max(self.demand.iter().sum::<f64>())
            .max(f64::MIN_POSITIVE);
        let eps = 1e-14 * scale;

        let mut rem_s: Vec<f64> = self.supply.iter().map(|&s| if s > eps { s } else { 0.0 }).collect();
        let mut rem_d: Vec<f64> = self.demand.iter().map(|&d| if d > eps { d } else { 0.0 }).collect();
        let mut pot = vec![0.0_f64; nodes];
        // Flow into each column: (row, amount, arc cost).
        let mut col_in: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); cols];

        let mut dist = vec![f64::INFINITY; nodes];
        let mut done = vec![false; nodes];
        let mut pred = vec![Pred::None; nodes];
        let mut heap = BinaryHeap::new();
        let max_iter = 50 * (nodes + 1) * (nodes + 1) + 1000;

        for _ in 0..max_iter {
            if !rem_s.iter().any(|&s| s > 0.0) || !rem_d.iter().any(|&d| d > 0.0) {
                let mut flows: Flows = col_in
                    .iter()
                    .enumerate()
                    .flat_map(|(j, v)| v.iter().map(move |&(i, f, _)| (i, j, f)))
                    .filter(|&(_, _, f)| f > 0.0)
                    .collect();
                flows.sort_by_key(|a| (a.0, a.1));
                return Ok(flows);
            }

            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            done.iter_mut().for_each(|d| *d = false);
            pred.iter_mut().for_each(|p| *p = Pred::None);
            heap.clear();
            for (i, &s) in rem_s.iter().enumerate() {
                if s > 0.0 {
                    dist[i] = 0.0;
                    heap.push(Entry { dist: 0.0, node: i });
                }
            }

            let mut target = None;
            while let Some(Entry { dist: d, node: u }) = heap.pop() {
                if done[u] || d > dist[u] {
                    continue;
                }
                done[u] = true;
                if u >= rows {
                    let j = u - rows;
                    if rem_d[j] > 0.0 {
                        target = Some(u);
                        break;
                    }
                    for &(i, f, c) in &col_in[j] {
                        if f <= 0.0 || done[i] {
                            continue;
                        }
                        let nd = d + (-c + pot[u] - pot[i]).max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            pred[i] = Pred::Backward(j);
                            heap.push(Entry { dist: nd, node: i });
                        }
                    }
                } else {
                    for &(j, c) in &self.arcs[u] {
                        let v = rows + j;
                        if done[v] {
                            continue;
                        }
                        let nd = d + (c + pot[u] - pot[v]).max(0.0);
                        if nd < dist[v] {
                            dist[v] = nd;
                            pred[v] = Pred::Forward(u);
                            heap.push(Entry { dist: nd, node: v });
                        }
                    }
                }
            }

            let target = target.ok_or_else(|| Error::Solver("no augmenting path; problem infeasible".into()))?;
            let reach = dist[target];
            for v in 0..nodes {
                pot[v] += dist[v].min(reach);
            }

            // Walk back to find the bottleneck.
            let mut bottleneck = rem_d[target - rows];
            let mut v = target;
            let start_row;
            loop {
                match pred[v] {
                    Pred::Forward(i) => {
                        v = i;
                    }
                    Pred::Backward(j) => {
                        let f = col_in[j].iter().find(|e| e.0 == v).map(|e| e.1).unwrap_or(0.0);
                        bottleneck = bottleneck.min(f);
                        v = rows + j;
                    }
                    Pred::None => {
                        start_row = v;
                        break;
                    }
                }
            }
            bottleneck = bottleneck.min(rem_s[start_row]);

            // Augment.
            let mut v = target;
            loop {
                match pred[v] {
                    Pred::Forward(i) => {
                        let j = v - rows;
                        match col_in[j].iter_mut().find(|e| e.0 == i) {
                            Some(e) => e.1 += bottleneck,
                            None => {
                                let c = self.arcs[i]
                                    .iter()
                                    .find(|a| a.0 == j)
                                    .map(|a| a.1)
                                    .expect("forward arc exists");
                                col_in[j].push((i, bottleneck, c));
                            }
                        }
                        v = i;
                    }
                    Pred::Backward(j) => {
                        let i = v;
                        if let Some(pos) = col_in[j].iter().position(|e| e.0 == i) {
                            col_in[j][pos].1 -= bottleneck;
                            if col_in[j][pos].1 <= eps {
                                col_in[j].swap_remove(pos);
                            }
                        }
                        v = rows + j;
                    }
                    Pred::None => break,
                }
            }
            let jt = target - rows;
            rem_d[jt] -= bottleneck;
            if rem_d[jt] <= eps {
                rem_d[jt] = 0.0;
            }
            rem_s[start_row] -= bottleneck;
            if rem_s[start_row] <= eps {
                rem_s[start_row] = 0.0;
            }
        }
        Err(Error::Solver("iteration limit reached".into()))
    }
}
