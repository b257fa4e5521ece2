//! Cross-view lateral-root matching by keypoint voting.
//!
//! Every keypoint match casts votes for the pairs of boxes (one per view)
//! that contain its two endpoints. Pairs are then selected greedily from the
//! resulting score matrix.

use serde::{Deserialize, Serialize};

use crate::camera::Pixel;
use crate::detection::Detection2D;
use crate::error::Result;
use crate::scalar::Real;

/// Default minimum number of votes for an accepted box pairing.
pub const DEFAULT_MATCHING_THRESHOLD: u32 = 4;

/// A keypoint correspondence between view A (`p1`) and view B (`p2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct KeypointMatch<T: Real> {
    pub p1: Pixel<T>,
    pub p2: Pixel<T>,
    #[serde(rename = "conf")]
    pub confidence: T,
}

/// Supplies keypoint matches for a pair of views.
pub trait MatchProvider: Sync {
    fn matches(&self, view_a: usize, view_b: usize) -> Result<Vec<KeypointMatch<f64>>>;
}

/// How a keypoint lying in several boxes distributes its vote.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Vote for every (containing box in A, containing box in B) pair.
    #[default]
    AllContaining,
    /// Vote only for the smallest-area containing box on each side.
    SmallestBoxOnly,
}

/// Indices of every box containing `point` (boundary inclusive).
pub fn boxes_containing<T: Real>(point: &Pixel<T>, boxes: &[Detection2D<T>]) -> Vec<usize> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, d)| d.bbox.contains(point))
        .map(|(i, _)| i)
        .collect()
}

fn voters<T: Real>(point: &Pixel<T>, boxes: &[Detection2D<T>], mode: VoteMode) -> Vec<usize> {
    let all = boxes_containing(point, boxes);
    match mode {
        VoteMode::AllContaining => all,
        VoteMode::SmallestBoxOnly => all
            .into_iter()
            .min_by(|&a, &b| {
                boxes[a]
                    .bbox
                    .area()
                    .partial_cmp(&boxes[b].bbox.area())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            })
            .into_iter()
            .collect(),
    }
}

/// Vote tally between the boxes of two views, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchScoreMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<u32>,
}

impl MatchScoreMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            scores: vec![0; rows * cols],
        }
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged score matrix");
        Self {
            rows: rows.len(),
            cols,
            scores: rows.concat(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.scores[i * self.cols + j]
    }

    pub fn increment(&mut self, i: usize, j: usize) {
        self.scores[i * self.cols + j] += 1;
    }

    pub fn total(&self) -> u64 {
        self.scores.iter().map(|&s| s as u64).sum()
    }

    /// Element-wise sum, for merging partial tallies.
    pub fn merge(mut self, other: &MatchScoreMatrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.scores.iter_mut().zip(&other.scores).for_each(|(a, b)| *a += b);
        self
    }
}

pub fn build_score_matrix<T: Real>(
    matches: &[KeypointMatch<T>],
    boxes_a: &[Detection2D<T>],
    boxes_b: &[Detection2D<T>],
    mode: VoteMode,
) -> MatchScoreMatrix {
    let mut m = MatchScoreMatrix::zeros(boxes_a.len(), boxes_b.len());
    for km in matches {
        let ia = voters(&km.p1, boxes_a, mode);
        if ia.is_empty() {
            continue;
        }
        let jb = voters(&km.p2, boxes_b, mode);
        for &i in &ia {
            for &j in &jb {
                m.increment(i, j);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxPair {
    pub a: usize,
    pub b: usize,
    pub votes: u32,
}

/// Injective box pairing between two views.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxPairing {
    pub pairs: Vec<BoxPair>,
}

impl BoxPairing {
    /// Partner in view B of box `a`, if paired.
    pub fn partner_of_a(&self, a: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.a == a).map(|p| p.b)
    }

    pub fn partner_of_b(&self, b: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.b == b).map(|p| p.a)
    }
}

/// Repeatedly accepts the highest remaining cell (ties: smaller row, then
/// smaller column) while it has at least `threshold` votes, removing its row
/// and column each time.
pub fn greedy_pairing(matrix: &MatchScoreMatrix, threshold: u32) -> BoxPairing {
    let threshold = threshold.max(1);
    let mut cells: Vec<BoxPair> = (0..matrix.rows)
        .flat_map(|i| (0..matrix.cols).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let votes = matrix.get(i, j);
            (votes >= threshold).then_some(BoxPair { a: i, b: j, votes })
        })
        .collect();
    cells.sort_by(|x, y| y.votes.cmp(&x.votes).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));

    let mut row_used = vec![false; matrix.rows];
    let mut col_used = vec![false; matrix.cols];
    let mut pairs = Vec::new();
    for c in cells {
        if row_used[c.a] || col_used[c.b] {
            continue;
        }
        row_used[c.a] = true;
        col_used[c.b] = true;
        pairs.push(c);
    }
    BoxPairing { pairs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{BoxXYWH, Keypoint};

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> Detection2D<f64> {
        let kp = Keypoint {
            pixel: Pixel::new(x0, y0),
            visible: true,
        };
        Detection2D {
            bbox: BoxXYWH::from_corners(x0, y0, x1, y1),
            score: 1.0,
            keypoints: [kp, kp],
            provenance: None,
        }
    }

    #[test]
    fn containment() {
        let boxes = vec![bx(0.0, 0.0, 10.0, 10.0), bx(2.0, 2.0, 4.0, 4.0), bx(20.0, 20.0, 30.0, 30.0)];
        assert!(boxes_containing(&Pixel::new(50.0, 50.0), &boxes).is_empty());
        assert_eq!(boxes_containing(&Pixel::new(20.0, 20.0), &boxes), vec![2]);
        assert_eq!(boxes_containing(&Pixel::new(3.0, 3.0), &boxes), vec![0, 1]);
    }

    #[test]
    fn single_vote() {
        let a = vec![bx(0.0, 0.0, 10.0, 10.0), bx(50.0, 50.0, 60.0, 60.0)];
        let b: Vec<_> = (0..4).map(|k| bx(20.0 * k as f64, 0.0, 20.0 * k as f64 + 10.0, 10.0)).collect();
        let m = build_score_matrix(
            &[KeypointMatch { p1: Pixel::new(5.0, 5.0), p2: Pixel::new(65.0, 5.0), confidence: 1.0 }],
            &a,
            &b,
            VoteMode::AllContaining,
        );
        assert_eq!(m.get(0, 3), 1);
        assert_eq!(m.total(), 1);
        assert_eq!(build_score_matrix(&[], &a, &b, VoteMode::AllContaining).total(), 0);
    }

    #[test]
    fn smallest_box_vote() {
        let a = vec![bx(0.0, 0.0, 10.0, 10.0), bx(2.0, 2.0, 4.0, 4.0)];
        let b = vec![bx(0.0, 0.0, 10.0, 10.0)];
        let km = [KeypointMatch { p1: Pixel::new(3.0, 3.0), p2: Pixel::new(3.0, 3.0), confidence: 1.0 }];
        let all = build_score_matrix(&km, &a, &b, VoteMode::AllContaining);
        assert_eq!((all.get(0, 0), all.get(1, 0)), (1, 1));
        let small = build_score_matrix(&km, &a, &b, VoteMode::SmallestBoxOnly);
        assert_eq!((small.get(0, 0), small.get(1, 0)), (0, 1));
    }

    #[test]
    fn greedy_examples() {
        let m = MatchScoreMatrix::from_rows(&[vec![5, 1], vec![2, 4]]);
        assert_eq!(
            greedy_pairing(&m, 2).pairs,
            vec![BoxPair { a: 0, b: 0, votes: 5 }, BoxPair { a: 1, b: 1, votes: 4 }]
        );
        assert!(greedy_pairing(&m, 6).pairs.is_empty());
        let m = MatchScoreMatrix::from_rows(&[vec![3, 3], vec![3, 3]]);
        assert_eq!(
            greedy_pairing(&m, 1).pairs,
            vec![BoxPair { a: 0, b: 0, votes: 3 }, BoxPair { a: 1, b: 1, votes: 3 }]
        );
    }

    #[test]
    fn json_layouts() {
        let p = BoxPairing { pairs: vec![BoxPair { a: 1, b: 2, votes: 7 }] };
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"[{"a":1,"b":2,"votes":7}]"#);
        let km: Vec<KeypointMatch<f64>> = serde_json::from_str(r#"[{"p1":[1.5,2],"p2":[3,4],"conf":0.5}]"#).unwrap();
        assert_eq!(km[0].p1, Pixel::new(1.5, 2.0));
        assert_eq!(km[0].confidence, 0.5);
    }
}
