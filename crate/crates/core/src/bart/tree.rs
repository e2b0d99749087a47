//! Arena-allocated binary regression trees.

use serde::{Deserialize, Serialize};

pub const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub leaf: bool,
    pub var: u32,
    /// Observations with x[var] <= cut go left.
    pub cut: f64,
    pub left: u32,
    pub right: u32,
    pub parent: u32,
    pub depth: u32,
    pub mu: f64,
}

impl Node {
    fn leaf(parent: u32, depth: u32, mu: f64) -> Self {
        Node { leaf: true, var: 0, cut: 0.0, left: NONE, right: NONE, parent, depth, mu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub(crate) nodes: Vec<Node>,
    free: Vec<u32>,
}

impl Tree {
    pub fn stump(mu: f64) -> Self {
        Tree { nodes: vec![Node::leaf(NONE, 0, mu)], free: Vec::new() }
    }

    pub fn node(&self, id: u32) -> &Node {
        &self.nodes[id as usize]
    }

    pub fn node_mut(&mut self, id: u32) -> &mut Node {
        &mut self.nodes[id as usize]
    }

    fn alloc(&mut self, n: Node) -> u32 {
        match self.free.pop() {
            Some(id) => {
                self.nodes[id as usize] = n;
                id
            }
            None => {
                self.nodes.push(n);
                (self.nodes.len() - 1) as u32
            }
        }
    }

    /// Live node ids in depth-first order, root first.
    pub fn live(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            out.push(id);
            let n = self.node(id);
            if !n.leaf {
                stack.push(n.right);
                stack.push(n.left);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<u32> {
        self.live().into_iter().filter(|&id| self.node(id).leaf).collect()
    }

    /// Internal nodes whose children are both leaves.
    pub fn nogs(&self) -> Vec<u32> {
        self.live().into_iter().filter(|&id| self.is_nog(id)).collect()
    }

    pub fn is_nog(&self, id: u32) -> bool {
        let n = self.node(id);
        !n.leaf && self.node(n.left).leaf && self.node(n.right).leaf
    }

    pub fn is_stump(&self) -> bool {
        self.node(0).leaf
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    /// Turn leaf `id` into a split; returns the new (left, right) leaves.
    pub fn split(&mut self, id: u32, var: u32, cut: f64) -> (u32, u32) {
        let depth = self.node(id).depth + 1;
        let l = self.alloc(Node::leaf(id, depth, 0.0));
        let r = self.alloc(Node::leaf(id, depth, 0.0));
        let n = self.node_mut(id);
        n.leaf = false;
        n.var = var;
        n.cut = cut;
        n.left = l;
        n.right = r;
        (l, r)
    }

    /// Remove the two leaf children of `id`.
    pub fn collapse(&mut self, id: u32) {
        let (l, r) = {
            let n = self.node(id);
            (n.left, n.right)
        };
        self.free.push(l);
        self.free.push(r);
        let n = self.node_mut(id);
        n.leaf = true;
        n.left = NONE;
        n.right = NONE;
    }

    /// Leaf reached by a feature accessor.
    pub fn route(&self, get: impl Fn(usize) -> f64) -> u32 {
        let mut id = 0u32;
        loop {
            let n = self.node(id);
            if n.leaf {
                return id;
            }
            id = if get(n.var as usize) <= n.cut { n.left } else { n.right };
        }
    }

    pub fn eval(&self, get: impl Fn(usize) -> f64) -> f64 {
        self.node(self.route(get)).mu
    }

    /// Copy with live nodes renumbered densely in depth-first order.
    pub fn compact(&self) -> Tree {
        let live = self.live();
        let mut map = vec![NONE; self.nodes.len()];
        for (k, &id) in live.iter().enumerate() {
            map[id as usize] = k as u32;
        }
        let remap = |v: u32| if v == NONE { NONE } else { map[v as usize] };
        let nodes = live
            .iter()
            .map(|&id| {
                let n = *self.node(id);
                Node { left: remap(n.left), right: remap(n.right), parent: remap(n.parent), ..n }
            })
            .collect();
        Tree { nodes, free: Vec::new() }
    }

    pub(crate) fn from_nodes(nodes: Vec<Node>) -> Tree {
        Tree { nodes, free: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grow_collapse_and_route() {
        let mut t = Tree::stump(1.0);
        let (l, r) = t.split(0, 0, 0.5);
        t.node_mut(l).mu = -1.0;
        t.node_mut(r).mu = 2.0;
        assert_eq!(t.eval(|_| 0.5), -1.0);
        assert_eq!(t.eval(|_| 0.6), 2.0);
        assert_eq!(t.nogs(), vec![0]);
        let (ll, _) = t.split(l, 0, 0.1);
        t.node_mut(ll).mu = 5.0;
        assert_eq!(t.nogs(), vec![l]);
        assert_eq!(t.n_leaves(), 3);
        assert_eq!(t.node(ll).depth, 2);
        t.collapse(l);
        assert_eq!(t.n_leaves(), 2);
        // Freed slots are reused.
        let before = t.nodes.len();
        t.split(r, 0, 0.9);
        assert_eq!(t.nodes.len(), before);
        let c = t.compact();
        assert_eq!(c.live(), (0..c.nodes.len() as u32).collect::<Vec<_>>());
        for x in [0.0, 0.55, 0.95] {
            assert_eq!(c.eval(|_| x), t.eval(|_| x));
        }
    }
}
