use std::collections::BTreeMap;

use thiserror::Error;

use super::{Node, NodeId, NodeStatus};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node {0} already exists")]
    DuplicateId(NodeId),
    #[error("node {node} names unknown parent {parent}")]
    UnknownParent { node: NodeId, parent: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not a valid root (root must be id 0 without parent)")]
    InvalidRoot(NodeId),
    #[error("node {node} has no primary parent")]
    MissingParent { node: NodeId },
    #[error("node {node} is out of creation order (last id {last})")]
    OutOfOrder { node: NodeId, last: NodeId },
    #[error("node {0} is still a draft")]
    NotFinalized(NodeId),
}

/// The tree of explored solutions, shaped by primary-parent links.
///
/// Merge nodes remember every contributor in `merge_parents` but hang under
/// their primary parent only, so child counts and lineage follow a tree.
#[derive(Debug, Clone)]
pub struct EvolutionGraph {
    run_id: String,
    root: Option<NodeId>,
    nodes: BTreeMap<NodeId, Node>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
}

impl PartialEq for EvolutionGraph {
    fn eq(&self, other: &Self) -> bool {
        self.run_id == other.run_id && self.root == other.root && self.nodes == other.nodes
    }
}

impl EvolutionGraph {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self { run_id: run_id.into(), root: None, nodes: BTreeMap::new(), children: BTreeMap::new() }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn last_id(&self) -> Option<NodeId> {
        self.nodes.keys().next_back().copied()
    }

    pub fn next_id(&self) -> NodeId {
        self.last_id().map_or(NodeId::ROOT, NodeId::next)
    }

    /// Inserts a finalized node. The first node must be the root; every other
    /// node must name an existing primary parent and arrive in id order.
    pub fn add_node(&mut self, node: Node) -> Result<(), GraphError> {
        if self.nodes.contains_key(&node.id) {
            return Err(GraphError::DuplicateId(node.id));
        }
        if !node.is_finalized() {
            return Err(GraphError::NotFinalized(node.id));
        }
        match (self.root, node.primary_parent) {
            (None, None) if node.id.is_root() => {
                self.root = Some(node.id);
            }
            (None, _) => return Err(GraphError::InvalidRoot(node.id)),
            (Some(_), None) => return Err(GraphError::MissingParent { node: node.id }),
            (Some(_), Some(parent)) => {
                if !self.nodes.contains_key(&parent) {
                    return Err(GraphError::UnknownParent { node: node.id, parent });
                }
                if let Some(&p) = node.merge_parents.iter().find(|p| !self.nodes.contains_key(p)) {
                    return Err(GraphError::UnknownParent { node: node.id, parent: p });
                }
                if let Some(last) = self.last_id() {
                    if node.id <= last {
                        return Err(GraphError::OutOfOrder { node: node.id, last });
                    }
                }
                self.children.entry(parent).or_default().push(node.id);
            }
        }
        self.nodes.insert(node.id, node);
        Ok(())
    }

    /// Number of nodes whose primary parent is `id`.
    pub fn child_count(&self, id: NodeId) -> Result<usize, GraphError> {
        if !self.nodes.contains_key(&id) {
            return Err(GraphError::UnknownNode(id));
        }
        Ok(self.children(id).len())
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Path from the root down to `id`, root first.
    pub fn lineage(&self, id: NodeId) -> Result<Vec<NodeId>, GraphError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(parent) = cur.primary_parent {
            path.push(parent);
            cur = self.node(parent)?;
            if path.len() > self.nodes.len() {
                break;
            }
        }
        path.reverse();
        Ok(path)
    }

    pub fn depth(&self, id: NodeId) -> Result<usize, GraphError> {
        Ok(self.lineage(id)?.len() - 1)
    }

    /// The depth-1 ancestor of `id` (the branch it belongs to). The root is
    /// its own branch.
    pub fn branch_of(&self, id: NodeId) -> Result<NodeId, GraphError> {
        let path = self.lineage(id)?;
        Ok(path.get(1).copied().unwrap_or(path[0]))
    }

    pub fn is_ancestor(&self, ancestor: NodeId, of: NodeId) -> Result<bool, GraphError> {
        Ok(self.lineage(of)?.contains(&ancestor))
    }

    pub fn count_status(&self, status: NodeStatus) -> usize {
        self.nodes.values().filter(|n| n.status == status).count()
    }
}
