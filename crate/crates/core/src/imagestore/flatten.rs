//! Layer flattening with OCI whiteout semantics.

use std::collections::BTreeMap;
use std::ops::Bound;

use serde::{Deserialize, Serialize};

use super::layer::{join, split_parent, EntryKind, Layer, OPAQUE_WHITEOUT, WHITEOUT_PREFIX};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    File(Vec<u8>),
    Dir,
    Symlink(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
}

impl Node {
    pub fn implicit_dir() -> Self {
        Node {
            kind: NodeKind::Dir,
            mode: 0o755,
            uid: 0,
            gid: 0,
        }
    }

    pub fn is_dir(&self) -> bool {
        matches!(self.kind, NodeKind::Dir)
    }
}

/// A flattened root filesystem, keyed by absolute path. The root directory
/// itself is implicit.
pub type Tree = BTreeMap<String, Node>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlattenWarning {
    pub layer: usize,
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Flattened {
    pub tree: Tree,
    pub warnings: Vec<FlattenWarning>,
}

fn remove_children(tree: &mut Tree, dir: &str) -> usize {
    let prefix = if dir == "/" {
        "/".to_string()
    } else {
        format!("{dir}/")
    };
    let doomed: Vec<String> = tree
        .range::<String, _>((Bound::Included(&prefix), Bound::Unbounded))
        .take_while(|(k, _)| k.starts_with(&prefix))
        .map(|(k, _)| k.clone())
        .collect();
    for k in &doomed {
        tree.remove(k);
    }
    doomed.len()
}

fn remove_subtree(tree: &mut Tree, path: &str) -> bool {
    let existed = tree.remove(path).is_some();
    remove_children(tree, path);
    existed
}

fn ensure_parents(tree: &mut Tree, path: &str) {
    let mut end = 0;
    while let Some(next) = path[end + 1..].find('/') {
        end += 1 + next;
        let ancestor = &path[..end];
        if !tree.get(ancestor).is_some_and(Node::is_dir) {
            tree.insert(ancestor.to_string(), Node::implicit_dir());
        }
    }
}

/// Applies `layers` bottom-up.
///
/// Whiteouts in a layer act on the layers below it only: `.wh.<name>`
/// deletes `<name>` (and its subtree), `.wh..wh..opq` empties its directory.
/// Regular entries then apply in order; a later entry at the same path
/// replaces the earlier one, except that a directory over a directory only
/// updates metadata. Missing parents are created as `0755 root:root`
/// directories. No whiteout markers survive.
pub fn flatten_layers(layers: &[Layer]) -> Flattened {
    let mut tree = Tree::new();
    let mut warnings = Vec::new();

    for (li, layer) in layers.iter().enumerate() {
        let mut warn = |path: &str, message: &str| {
            warnings.push(FlattenWarning {
                layer: li,
                path: path.to_string(),
                message: message.to_string(),
            })
        };

        for e in &layer.entries {
            let (parent, name) = split_parent(&e.path);
            if name == OPAQUE_WHITEOUT {
                remove_children(&mut tree, parent);
            } else if let Some(target) = name.strip_prefix(WHITEOUT_PREFIX) {
                if target.is_empty() || target.starts_with(WHITEOUT_PREFIX) {
                    warn(&e.path, "unsupported whiteout marker ignored");
                    continue;
                }
                let victim = join(parent, target);
                if !remove_subtree(&mut tree, &victim) {
                    warn(&e.path, "whiteout references nothing");
                }
            }
        }

        for e in &layer.entries {
            let (parent, name) = split_parent(&e.path);
            if name.starts_with(WHITEOUT_PREFIX) {
                if name == OPAQUE_WHITEOUT && parent != "/" {
                    ensure_parents(&mut tree, &e.path);
                }
                continue;
            }
            let kind = match &e.kind {
                EntryKind::File(c) => NodeKind::File(c.clone()),
                EntryKind::Dir => NodeKind::Dir,
                EntryKind::Symlink(t) => NodeKind::Symlink(t.clone()),
                EntryKind::Hardlink(target) => match tree.get(target) {
                    Some(Node {
                        kind: NodeKind::File(c),
                        ..
                    }) => NodeKind::File(c.clone()),
                    _ => {
                        warn(&e.path, "hardlink target is not a regular file");
                        continue;
                    }
                },
            };
            let node = Node {
                kind,
                mode: e.mode,
                uid: e.uid,
                gid: e.gid,
            };
            ensure_parents(&mut tree, &e.path);
            let keep_children = node.is_dir() && tree.get(&e.path).is_some_and(Node::is_dir);
            if !keep_children {
                remove_children(&mut tree, &e.path);
            }
            tree.insert(e.path.clone(), node);
        }
    }

    Flattened { tree, warnings }
}
