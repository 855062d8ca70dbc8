//! Brute-force reference for layer flattening: materializes each layer into
//! a nested directory tree, one entry at a time, then lists the result.

use std::collections::BTreeMap;

use hpcc_core::imagestore::{Entry, EntryKind, Layer, Node, NodeKind, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
enum ONode {
    File {
        data: Vec<u8>,
        meta: (u32, u32, u32),
    },
    Link {
        target: String,
        meta: (u32, u32, u32),
    },
    Dir {
        meta: (u32, u32, u32),
        kids: BTreeMap<String, ONode>,
    },
}

fn new_dir() -> ONode {
    ONode::Dir {
        meta: (0o755, 0, 0),
        kids: BTreeMap::new(),
    }
}

fn components(path: &str) -> Vec<&str> {
    path.split('/').filter(|c| !c.is_empty()).collect()
}

fn kids_mut(n: &mut ONode) -> Option<&mut BTreeMap<String, ONode>> {
    match n {
        ONode::Dir { kids, .. } => Some(kids),
        _ => None,
    }
}

/// Walks to the directory at `comps` without creating anything.
fn find_dir<'a>(root: &'a mut ONode, comps: &[&str]) -> Option<&'a mut BTreeMap<String, ONode>> {
    let mut cur = kids_mut(root)?;
    for c in comps {
        cur = kids_mut(cur.get_mut(*c)?)?;
    }
    Some(cur)
}

/// Walks to `comps`, turning anything that is not a directory into a fresh
/// one.
fn make_dirs<'a>(root: &'a mut ONode, comps: &[&str]) -> &'a mut BTreeMap<String, ONode> {
    let mut cur = kids_mut(root).unwrap();
    for c in comps {
        let slot = cur.entry(c.to_string()).or_insert_with(new_dir);
        if !matches!(slot, ONode::Dir { .. }) {
            *slot = new_dir();
        }
        cur = kids_mut(slot).unwrap();
    }
    cur
}

fn lookup<'a>(root: &'a ONode, path: &str) -> Option<&'a ONode> {
    let mut cur = root;
    for c in components(path) {
        match cur {
            ONode::Dir { kids, .. } => cur = kids.get(c)?,
            _ => return None,
        }
    }
    Some(cur)
}

pub fn materialize(layers: &[Layer]) -> Tree {
    let mut root = new_dir();
    for layer in layers {
        for e in &layer.entries {
            let comps = components(&e.path);
            let (name, parent) = comps.split_last().unwrap();
            if *name == ".wh..wh..opq" {
                if let Some(kids) = find_dir(&mut root, parent) {
                    kids.clear();
                }
            } else if let Some(target) = name.strip_prefix(".wh.") {
                if target.is_empty() || target.starts_with(".wh.") {
                    continue;
                }
                if let Some(kids) = find_dir(&mut root, parent) {
                    kids.remove(target);
                }
            }
        }
        for e in &layer.entries {
            let comps = components(&e.path);
            let (name, parent) = comps.split_last().unwrap();
            if name.starts_with(".wh.") {
                if *name == ".wh..wh..opq" {
                    make_dirs(&mut root, parent);
                }
                continue;
            }
            let meta = (e.mode, e.uid, e.gid);
            let node = match &e.kind {
                EntryKind::File(d) => ONode::File {
                    data: d.clone(),
                    meta,
                },
                EntryKind::Symlink(t) => ONode::Link {
                    target: t.clone(),
                    meta,
                },
                EntryKind::Dir => ONode::Dir {
                    meta,
                    kids: BTreeMap::new(),
                },
                EntryKind::Hardlink(t) => match lookup(&root, t) {
                    Some(ONode::File { data, .. }) => ONode::File {
                        data: data.clone(),
                        meta,
                    },
                    _ => continue,
                },
            };
            let dir = make_dirs(&mut root, parent);
            match (dir.get_mut(*name), node) {
                (Some(ONode::Dir { meta: m, .. }), ONode::Dir { meta, .. }) => *m = meta,
                (_, node) => {
                    dir.insert(name.to_string(), node);
                }
            }
        }
    }
    let mut out = Tree::new();
    list(&root, "", &mut out);
    out
}

fn list(n: &ONode, prefix: &str, out: &mut Tree) {
    if let ONode::Dir { kids, .. } = n {
        for (name, k) in kids {
            let path = format!("{prefix}/{name}");
            let (kind, (mode, uid, gid)) = match k {
                ONode::File { data, meta } => (NodeKind::File(data.clone()), *meta),
                ONode::Link { target, meta } => (NodeKind::Symlink(target.clone()), *meta),
                ONode::Dir { meta, .. } => (NodeKind::Dir, *meta),
            };
            out.insert(
                path.clone(),
                Node {
                    kind,
                    mode,
                    uid,
                    gid,
                },
            );
            list(k, &path, out);
        }
    }
}

const NAMES: [&str; 4] = ["a", "b", "c", "lib"];

fn random_path(rng: &mut ChaCha8Rng) -> String {
    let depth = rng.random_range(1..=3);
    let mut p = String::new();
    for _ in 0..depth {
        p.push('/');
        p.push_str(NAMES[rng.random_range(0..NAMES.len())]);
    }
    p
}

fn random_entry(rng: &mut ChaCha8Rng) -> Entry {
    let path = random_path(rng);
    let e = match rng.random_range(0..10) {
        0..=3 => Entry::file(path, format!("v{}", rng.random_range(0..4))),
        4 | 5 => Entry::dir(path),
        6 => Entry::symlink(path, random_path(rng)),
        7 => Entry::hardlink(path, random_path(rng)),
        8 => {
            let (parent, name) = path.rsplit_once('/').unwrap();
            let parent = if parent.is_empty() { "/" } else { parent };
            if rng.random_bool(0.1) {
                Entry::whiteout(parent, ".wh.bogus")
            } else {
                Entry::whiteout(parent, name)
            }
        }
        _ => {
            let (parent, _) = path.rsplit_once('/').unwrap();
            Entry::opaque(if parent.is_empty() { "/" } else { parent })
        }
    };
    let mode = [0o644, 0o755, 0o600][rng.random_range(0..3)];
    let uid = [0, 1000][rng.random_range(0..2)];
    e.with_mode(mode)
        .owned(uid, uid)
        .with_mtime(rng.random_range(0..1_000_000))
}

/// A stack of at most `max_layers` layers holding at most `max_entries`
/// entries in total.
pub fn random_stack(seed: u64, max_layers: usize, max_entries: usize) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = rng.random_range(1..=max_layers);
    let mut budget = rng.random_range(n_layers..=max_entries);
    let mut layers = Vec::new();
    for i in 0..n_layers {
        let left = n_layers - i - 1;
        let n = if left == 0 {
            budget
        } else {
            rng.random_range(1..=budget - left)
        };
        budget -= n;
        layers.push(Layer::new((0..n).map(|_| random_entry(&mut rng)).collect()));
    }
    layers
}
