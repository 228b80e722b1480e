//! Sum tree for proportional sampling.

use serde::{Deserialize, Serialize};

/// Complete binary tree over `capacity` leaves (a power of two) stored in an
/// array: node `k` has children `2k` and `2k + 1`, leaves live at
/// `capacity..2 * capacity`, and node 0 is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    /// Creates an all-zero tree; `capacity` is rounded up to a power of two.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1).next_power_of_two();
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    /// Sets a leaf and recomputes its ancestors from their children, so
    /// every internal node is exactly the sum of its two children.
    pub fn set(&mut self, leaf: usize, value: f64) {
        assert!(leaf < self.capacity, "leaf {leaf} out of range");
        let mut k = self.capacity + leaf;
        self.nodes[k] = value;
        if self.capacity == 1 {
            return;
        }
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval `[c_{i-1}, c_i)` contains `mass`.
    /// Zero-weight leaves are never returned while the total is positive.
    pub fn find(&self, mass: f64) -> usize {
        if self.capacity == 1 {
            return 0;
        }
        let mut mass = mass.max(0.0);
        let mut k = 1;
        while k < self.capacity {
            let left = 2 * k;
            if mass < self.nodes[left] || self.nodes[left + 1] == 0.0 {
                k = left;
            } else {
                mass -= self.nodes[left];
                k = left + 1;
            }
        }
        let mut leaf = k - self.capacity;
        // rounding can land on an empty leaf at the right edge of a subtree
        while self.get(leaf) == 0.0 && leaf > 0 {
            leaf -= 1;
        }
        leaf
    }

    /// Largest absolute deviation between an internal node and the sum of
    /// its children.
    pub fn consistency_error(&self) -> f64 {
        (1..self.capacity)
            .map(|k| (self.nodes[k] - (self.nodes[2 * k] + self.nodes[2 * k + 1])).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_and_find() {
        let mut t = SumTree::new(3);
        assert_eq!(t.capacity(), 4);
        t.set(0, 1.0);
        t.set(1, 2.0);
        t.set(2, 3.0);
        assert_eq!(t.total(), 6.0);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 1);
        assert_eq!(t.find(2.999), 1);
        assert_eq!(t.find(3.0), 2);
        assert_eq!(t.find(5.999), 2);
        // mass at or past the total never lands on the empty fourth leaf
        assert_eq!(t.find(6.0), 2);
        assert_eq!(t.find(7.5), 2);
    }

    #[test]
    fn update_changes_root() {
        let mut t = SumTree::new(2);
        t.set(0, 1.0);
        t.set(1, 1.0);
        let before = t.total();
        t.set(0, 4.0);
        assert_eq!(t.total() - before, 3.0);
        assert_eq!(t.consistency_error(), 0.0);
    }

    #[test]
    fn single_leaf_tree() {
        let mut t = SumTree::new(1);
        t.set(0, 2.5);
        assert_eq!(t.total(), 2.5);
        assert_eq!(t.find(1.0), 0);
    }
}
