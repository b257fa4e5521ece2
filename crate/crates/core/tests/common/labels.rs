//! Brute-force label propagation.

use std::collections::HashMap;

use rootskel::main_root::{Label, LabelMatrix};

/// Straightforward re-implementation: every cell finds its run by walking
/// left and right, then recounts the row above from scratch.
pub fn reference_propagation(init: &LabelMatrix, literal: bool) -> (Vec<Vec<Label>>, Vec<(usize, usize, usize)>) {
    let (w, h) = (init.width(), init.height());
    let mut grid: Vec<Vec<Label>> = (0..h).map(|y| (0..w).map(|x| init.get(x, y)).collect()).collect();
    let mut ledger = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if grid[y][x] == Label::Background {
                x += 1;
                continue;
            }
            let mut x2 = x;
            while x2 + 1 < w && grid[y][x2 + 1] != Label::Background {
                x2 += 1;
            }
            let mut counts: HashMap<usize, usize> = HashMap::new();
            if y > 0 {
                for c in &grid[y - 1][x..=x2] {
                    if let Label::Root(r) = c {
                        *counts.entry(*r).or_insert(0) += 1;
                    }
                }
            }
            let top = counts.values().copied().max();
            let m = top.map(|t| counts.iter().filter(|(_, &n)| n == t).map(|(&l, _)| l).min().unwrap());
            let mut ks: Vec<usize> = grid[y][x..=x2]
                .iter()
                .filter_map(|c| if let Label::Root(r) = c { Some(*r) } else { None })
                .collect();
            ks.sort();
            ks.dedup();
            if let Some(m) = m {
                for &k in &ks {
                    if k != m {
                        ledger.push((m, k, y));
                    }
                }
            }
            let fill = ks.first().copied().or(m);
            for c in &mut grid[y][x..=x2] {
                match (literal, fill) {
                    (false, Some(f)) => *c = Label::Root(f),
                    (true, _) => {
                        if let (Label::Unlabeled, Some(m)) = (*c, m) {
                            *c = Label::Root(m);
                        }
                    }
                    _ => {}
                }
            }
            x = x2 + 1;
        }
    }
    (grid, ledger)
}
