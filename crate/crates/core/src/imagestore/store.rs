use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use super::artifact::{artifact_digest, encode, LowerImage};
use super::backend::StoreBackend;
use super::flatten::{flatten_layers, FlattenWarning, NodeKind, Tree};
use super::layer::LayeredImage;
use super::view::{Identity, MountHandle, MountOwner, ReleaseOutcome, UpperLayer};
use super::ImageStoreError;
use crate::digest::Digest;

pub const ARTIFACT_DIR: &str = "artifacts";
pub const META_DIR: &str = "meta";

pub fn artifact_path(digest: &Digest) -> String {
    format!("{ARTIFACT_DIR}/{}.sqimg", digest.hex())
}

pub fn record_path(digest: &Digest) -> String {
    format!("{META_DIR}/{}.rec", digest.hex())
}

fn check_reference(reference: &str) -> Result<(), ImageStoreError> {
    if reference.is_empty()
        || reference
            .chars()
            .any(|c| c.is_whitespace() || c.is_control())
    {
        return Err(ImageStoreError::InvalidReference(reference.to_string()));
    }
    Ok(())
}

/// Node-local staging area holding pulled images before migration.
#[derive(Debug, Clone, Default)]
pub struct LocalStore {
    images: BTreeMap<String, LayeredImage>,
}

impl LocalStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, reference: &str) -> Option<&LayeredImage> {
        self.images.get(reference)
    }

    pub fn remove(&mut self, reference: &str) -> Option<LayeredImage> {
        self.images.remove(reference)
    }

    pub fn references(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageRecord {
    pub reference: String,
    pub config_digest: Digest,
    pub source_digests: Vec<Digest>,
}

/// Verifies and stages `image`. Importing the same content twice is a no-op.
pub fn import_image(
    image: LayeredImage,
    local: &mut LocalStore,
) -> Result<ImageRecord, ImageStoreError> {
    check_reference(&image.reference)?;
    if image.layers.is_empty() {
        return Err(ImageStoreError::EmptyImage(image.reference));
    }
    image.verify()?;
    for layer in &image.layers {
        layer.check_paths()?;
    }
    let record = ImageRecord {
        reference: image.reference.clone(),
        config_digest: image.config_digest.clone(),
        source_digests: image.layer_digests.clone(),
    };
    if let Some(existing) = local.images.get(&image.reference) {
        if existing.config_digest != image.config_digest {
            return Err(ImageStoreError::ReferenceConflict {
                reference: image.reference,
                existing: existing.config_digest.to_string(),
                new: image.config_digest.to_string(),
            });
        }
        return Ok(record);
    }
    local.images.insert(image.reference.clone(), image);
    Ok(record)
}

/// Metadata record stored next to each artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreRecord {
    pub reference: String,
    pub digest: Digest,
    pub created_at: u64,
    pub config: Digest,
    pub sources: Vec<Digest>,
    pub entrypoint: Vec<String>,
    pub env: Vec<(String, String)>,
}

impl StoreRecord {
    pub fn to_text(&self) -> String {
        let sources: Vec<&str> = self.sources.iter().map(Digest::as_str).collect();
        format!(
            "reference={}\ndigest={}\ncreated_at={}\nconfig={}\nsources={}\nentrypoint={}\nenv={}\n",
            self.reference,
            self.digest,
            self.created_at,
            self.config,
            sources.join(","),
            serde_json::to_string(&self.entrypoint).expect("strings serialize"),
            serde_json::to_string(&self.env).expect("strings serialize"),
        )
    }

    pub fn parse(path: &str, text: &str) -> Result<Self, ImageStoreError> {
        let bad = |reason: String| ImageStoreError::BadRecord {
            path: path.to_string(),
            reason,
        };
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| bad(format!("missing {k}")));
        let digest_of = |k: &str, v: &str| {
            Digest::parse(v).ok_or_else(|| bad(format!("{k} is not a digest: {v}")))
        };
        let reference = take("reference")?.to_string();
        let digest = digest_of("digest", take("digest")?)?;
        let created_at = take("created_at")?
            .parse()
            .map_err(|_| bad("created_at is not an integer".into()))?;
        let config = digest_of("config", take("config")?)?;
        let sources_raw = take("sources")?;
        let sources = if sources_raw.is_empty() {
            Vec::new()
        } else {
            sources_raw
                .split(',')
                .map(|s| digest_of("sources", s))
                .collect::<Result<_, _>>()?
        };
        let entrypoint = serde_json::from_str(take("entrypoint")?)
            .map_err(|e| bad(format!("entrypoint: {e}")))?;
        let env = serde_json::from_str(take("env")?).map_err(|e| bad(format!("env: {e}")))?;
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown key {k}")));
        }
        check_reference(&reference).map_err(|_| bad("invalid reference".into()))?;
        Ok(StoreRecord {
            reference,
            digest,
            created_at,
            config,
            sources,
            entrypoint,
            env,
        })
    }
}

fn parse_record_bytes(path: &str, bytes: Vec<u8>) -> Result<StoreRecord, ImageStoreError> {
    let text = String::from_utf8(bytes).map_err(|_| ImageStoreError::BadRecord {
        path: path.to_string(),
        reason: "not UTF-8".into(),
    })?;
    StoreRecord::parse(path, &text)
}

/// A migrated image opened from the shared store.
#[derive(Debug, Clone)]
pub struct SquashedImage {
    pub record: StoreRecord,
    pub lower: Arc<LowerImage>,
}

impl SquashedImage {
    pub fn reference(&self) -> &str {
        &self.record.reference
    }

    pub fn digest(&self) -> &Digest {
        &self.record.digest
    }
}

#[derive(Debug, Clone)]
pub struct Migration {
    pub image: SquashedImage,
    /// The identical artifact was already stored; nothing was written.
    pub already_present: bool,
    pub warnings: Vec<FlattenWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemovalReport {
    pub reference: String,
    pub digest: Digest,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReclaimedMount {
    pub id: u64,
    pub reference: String,
    pub owner: MountOwner,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WatcherReport {
    pub reclaimed: Vec<ReclaimedMount>,
}

/// The shared, read-only-for-consumers image store.
#[derive(Debug)]
pub struct SharedStore<B> {
    backend: B,
    mounts: Vec<MountHandle>,
    next_mount: u64,
}

impl<B: StoreBackend> SharedStore<B> {
    pub fn new(backend: B) -> Self {
        SharedStore {
            backend,
            mounts: Vec::new(),
            next_mount: 0,
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn read_record(&self, path: &str) -> Result<StoreRecord, ImageStoreError> {
        let bytes = self
            .backend
            .read(path)
            .map_err(|e| ImageStoreError::io(path, e))?;
        parse_record_bytes(path, bytes)
    }

    /// All records, sorted by reference.
    pub fn list_images(&self) -> Result<Vec<StoreRecord>, ImageStoreError> {
        let names = self
            .backend
            .list(META_DIR)
            .map_err(|e| ImageStoreError::io(META_DIR, e))?;
        let mut out = Vec::new();
        for name in names.iter().filter(|n| n.ends_with(".rec")) {
            out.push(self.read_record(&format!("{META_DIR}/{name}"))?);
        }
        out.sort_by(|a, b| a.reference.cmp(&b.reference));
        Ok(out)
    }

    pub fn find(&self, reference: &str) -> Result<Option<StoreRecord>, ImageStoreError> {
        Ok(self
            .list_images()?
            .into_iter()
            .find(|r| r.reference == reference))
    }

    /// Record for a known digest: a single read.
    pub fn record_for(&self, digest: &Digest) -> Result<Option<StoreRecord>, ImageStoreError> {
        let path = record_path(digest);
        match self.backend.read(&path) {
            Ok(bytes) => parse_record_bytes(&path, bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ImageStoreError::io(&path, e)),
        }
    }

    /// Flattens, encodes and publishes a staged image.
    pub fn migrate(
        &self,
        reference: &str,
        local: &LocalStore,
        created_at: u64,
    ) -> Result<Migration, ImageStoreError> {
        let image = local
            .get(reference)
            .ok_or_else(|| ImageStoreError::NotInLocalStore(reference.to_string()))?;
        self.migrate_image(image, created_at)
    }

    pub fn migrate_image(
        &self,
        image: &LayeredImage,
        created_at: u64,
    ) -> Result<Migration, ImageStoreError> {
        check_reference(&image.reference)?;
        if image.layers.is_empty() {
            return Err(ImageStoreError::EmptyImage(image.reference.clone()));
        }
        image.verify()?;
        let flat = flatten_layers(&image.layers);
        let bytes: Arc<[u8]> = encode(&flat.tree).into();
        let digest = artifact_digest(&bytes).expect("encoded artifacts carry a trailer");

        for existing in self.list_images()? {
            if existing.reference == image.reference && existing.digest != digest {
                return Err(ImageStoreError::ReferenceConflict {
                    reference: image.reference.clone(),
                    existing: existing.digest.to_string(),
                    new: digest.to_string(),
                });
            }
            if existing.digest == digest && existing.reference != image.reference {
                return Err(ImageStoreError::DigestAliased {
                    digest: digest.to_string(),
                    existing: existing.reference,
                    reference: image.reference.clone(),
                });
            }
            if existing.digest == digest {
                let lower = Arc::new(LowerImage::decode(bytes)?);
                return Ok(Migration {
                    image: SquashedImage {
                        record: existing,
                        lower,
                    },
                    already_present: true,
                    warnings: flat.warnings,
                });
            }
        }

        let record = StoreRecord {
            reference: image.reference.clone(),
            digest: digest.clone(),
            created_at,
            config: image.config_digest.clone(),
            sources: image.layer_digests.clone(),
            entrypoint: image.config.entrypoint.clone(),
            env: image.config.env.clone(),
        };
        let apath = artifact_path(&digest);
        self.backend
            .write_atomic(&apath, &bytes)
            .map_err(|e| ImageStoreError::io(&apath, e))?;
        // The record is the commit point: an artifact without one is an
        // orphan that `check_consistency` reports.
        let rpath = record_path(&digest);
        if let Err(e) = self
            .backend
            .write_atomic(&rpath, record.to_text().as_bytes())
        {
            let _ = self.backend.remove(&apath);
            return Err(ImageStoreError::io(&rpath, e));
        }
        Ok(Migration {
            image: SquashedImage {
                record,
                lower: Arc::new(LowerImage::decode(bytes)?),
            },
            already_present: false,
            warnings: flat.warnings,
        })
    }

    fn load_artifact(&self, record: &StoreRecord) -> Result<LowerImage, ImageStoreError> {
        let path = artifact_path(&record.digest);
        let bytes = self
            .backend
            .read(&path)
            .map_err(|e| ImageStoreError::io(&path, e))?;
        let lower = LowerImage::decode(bytes.into())?;
        if lower.digest != record.digest {
            return Err(ImageStoreError::DigestMismatch {
                what: format!("artifact {path}"),
                expected: record.digest.to_string(),
                actual: lower.digest.to_string(),
            });
        }
        Ok(lower)
    }

    pub fn open(&self, reference: &str) -> Result<SquashedImage, ImageStoreError> {
        let record = self
            .find(reference)?
            .ok_or_else(|| ImageStoreError::UnknownReference(reference.to_string()))?;
        let lower = Arc::new(self.load_artifact(&record)?);
        Ok(SquashedImage { record, lower })
    }

    /// Mounts `img` for one step. The artifact is re-read and verified
    /// against its record; later file accesses only consult the in-memory
    /// index.
    pub fn mount_view(
        &mut self,
        img: &SquashedImage,
        upper: UpperLayer,
        identity: Identity,
        owner: MountOwner,
    ) -> Result<MountHandle, ImageStoreError> {
        let lower = self.load_artifact(&img.record)?;
        let id = self.next_mount;
        self.next_mount += 1;
        let handle = MountHandle::new(
            id,
            img.record.reference.clone(),
            Arc::new(lower),
            upper,
            identity,
            owner,
        );
        self.mounts.push(handle.clone());
        Ok(handle)
    }

    pub fn release_view(&mut self, handle: &MountHandle) -> ReleaseOutcome {
        let out = handle.release();
        self.mounts.retain(|h| !h.ptr_eq(handle));
        out
    }

    /// Releases every view whose owner `terminated` reports as finished.
    pub fn watcher_tick(&mut self, terminated: impl Fn(&MountOwner) -> bool) -> WatcherReport {
        let mut report = WatcherReport::default();
        let mut keep = Vec::with_capacity(self.mounts.len());
        for h in self.mounts.drain(..) {
            if !h.is_live() {
                continue;
            }
            if terminated(&h.owner()) {
                h.release();
                report.reclaimed.push(ReclaimedMount {
                    id: h.id(),
                    reference: h.reference().to_string(),
                    owner: h.owner(),
                });
            } else {
                keep.push(h);
            }
        }
        self.mounts = keep;
        report
    }

    pub fn live_mounts(&self) -> Vec<MountHandle> {
        self.mounts
            .iter()
            .filter(|h| h.is_live())
            .cloned()
            .collect()
    }

    pub fn remove_image(&mut self, reference: &str) -> Result<RemovalReport, ImageStoreError> {
        let record = self
            .find(reference)?
            .ok_or_else(|| ImageStoreError::UnknownReference(reference.to_string()))?;
        let live = self
            .mounts
            .iter()
            .filter(|h| h.is_live() && h.reference() == reference)
            .count();
        if live > 0 {
            return Err(ImageStoreError::Busy {
                reference: reference.to_string(),
                live,
            });
        }
        let rpath = record_path(&record.digest);
        let apath = artifact_path(&record.digest);
        self.backend
            .remove(&rpath)
            .map_err(|e| ImageStoreError::io(&rpath, e))?;
        self.backend
            .remove(&apath)
            .map_err(|e| ImageStoreError::io(&apath, e))?;
        Ok(RemovalReport {
            reference: reference.to_string(),
            digest: record.digest,
            removed: vec![rpath, apath],
        })
    }

    /// Problems found in the store; empty when consistent. Every record
    /// must point at a verifying artifact and every artifact must have a
    /// record.
    pub fn check_consistency(&self) -> Result<Vec<String>, ImageStoreError> {
        let mut problems = Vec::new();
        let records = self.list_images()?;
        let mut refs = BTreeMap::new();
        for r in &records {
            if let Some(prev) = refs.insert(r.reference.clone(), r.digest.clone()) {
                problems.push(format!(
                    "reference {} bound to {} and {}",
                    r.reference, prev, r.digest
                ));
            }
            if let Err(e) = self.load_artifact(r) {
                problems.push(format!("{}: {e}", r.reference));
            }
        }
        let artifacts = self
            .backend
            .list(ARTIFACT_DIR)
            .map_err(|e| ImageStoreError::io(ARTIFACT_DIR, e))?;
        for name in artifacts {
            let hex = name.strip_suffix(".sqimg").unwrap_or(&name);
            if !records.iter().any(|r| r.digest.hex() == hex) {
                problems.push(format!("orphan artifact {ARTIFACT_DIR}/{name}"));
            }
        }
        Ok(problems)
    }
}

/// An unpacked image tree on the shared filesystem, the layout a squashed
/// artifact replaces. Each file open costs a lookup and a read against the
/// store.
#[derive(Debug)]
pub struct PlainTreeView<'a, B> {
    backend: &'a B,
    root: String,
}

impl<'a, B: StoreBackend> PlainTreeView<'a, B> {
    /// Writes every regular file of `tree` below `root`.
    pub fn unpack(backend: &'a B, root: &str, tree: &Tree) -> Result<Self, ImageStoreError> {
        for (path, node) in tree {
            if let NodeKind::File(c) = &node.kind {
                let p = format!("{root}{path}");
                backend
                    .write_atomic(&p, c)
                    .map_err(|e| ImageStoreError::io(&p, e))?;
            }
        }
        Ok(Self::attach(backend, root))
    }

    /// Uses an already unpacked tree.
    pub fn attach(backend: &'a B, root: &str) -> Self {
        PlainTreeView {
            backend,
            root: root.to_string(),
        }
    }

    pub fn open(&self, path: &str) -> Result<Vec<u8>, ImageStoreError> {
        let p = format!("{}{path}", self.root);
        match self.backend.stat(&p) {
            Ok(Some(_)) => {}
            Ok(None) => return Err(ImageStoreError::NotFound(path.to_string())),
            Err(e) => return Err(ImageStoreError::io(&p, e)),
        }
        self.backend
            .read(&p)
            .map_err(|e| ImageStoreError::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::super::backend::{MemBackend, Recorder};
    use super::super::layer::{Entry, ImageConfig, Layer};
    use super::*;

    fn image(reference: &str, content: &str) -> LayeredImage {
        LayeredImage::new(
            reference,
            vec![
                Layer::new(vec![Entry::dir("/etc"), Entry::file("/etc/x", "base")]),
                Layer::new(vec![Entry::file("/etc/y", content)]),
                Layer::new(vec![Entry::file("/bin/app", "#!")]),
            ],
            ImageConfig {
                entrypoint: vec!["/bin/app".into()],
                env: vec![("PATH".into(), "/bin".into())],
            },
        )
    }

    #[test]
    fn import_rules() {
        let mut local = LocalStore::new();
        let rec = import_image(image("a:1", "y"), &mut local).unwrap();
        assert_eq!(rec.source_digests.len(), 3);
        assert_eq!(import_image(image("a:1", "y"), &mut local).unwrap(), rec);
        assert!(matches!(
            import_image(image("a:1", "other"), &mut local),
            Err(ImageStoreError::ReferenceConflict { .. })
        ));
        let empty = LayeredImage::new("e", vec![], ImageConfig::default());
        assert!(matches!(
            import_image(empty, &mut local),
            Err(ImageStoreError::EmptyImage(_))
        ));
        let mut bad = image("b", "y");
        bad.layers[0].entries[1].path = "/etc/../x".into();
        bad = LayeredImage::new("b", bad.layers, bad.config);
        assert!(matches!(
            import_image(bad, &mut local),
            Err(ImageStoreError::MalformedPath(_))
        ));
    }

    #[test]
    fn record_text_round_trip() {
        let store = SharedStore::new(MemBackend::new());
        let m = store.migrate_image(&image("a:1", "y"), 42).unwrap();
        let text = m.image.record.to_text();
        assert_eq!(StoreRecord::parse("r", &text).unwrap(), m.image.record);
        assert!(StoreRecord::parse("r", "reference=a\n").is_err());
        assert!(StoreRecord::parse("r", &format!("{text}extra=1\n")).is_err());
    }

    #[test]
    fn migrate_is_idempotent_and_detects_collisions() {
        let store = SharedStore::new(Recorder::new(MemBackend::new()));
        let first = store.migrate_image(&image("a:1", "y"), 1).unwrap();
        assert!(!first.already_present);
        assert_eq!(store.backend().counters().writes, 2);
        let again = store.migrate_image(&image("a:1", "y"), 2).unwrap();
        assert!(again.already_present);
        assert_eq!(again.image.digest(), first.image.digest());
        assert_eq!(store.backend().counters().writes, 2);
        assert!(matches!(
            store.migrate_image(&image("a:1", "z"), 3),
            Err(ImageStoreError::ReferenceConflict { .. })
        ));
        assert!(matches!(
            store.migrate_image(&image("alias", "y"), 3),
            Err(ImageStoreError::DigestAliased { .. })
        ));
    }

    #[test]
    fn list_and_remove() {
        let mut store = SharedStore::new(MemBackend::new());
        store.migrate_image(&image("b", "1"), 0).unwrap();
        store.migrate_image(&image("a", "2"), 0).unwrap();
        let refs: Vec<_> = store
            .list_images()
            .unwrap()
            .into_iter()
            .map(|r| r.reference)
            .collect();
        assert_eq!(refs, vec!["a", "b"]);
        let img = store.open("a").unwrap();
        let h = store
            .mount_view(
                &img,
                UpperLayer::new(),
                Identity::new(1, 1),
                MountOwner::default(),
            )
            .unwrap();
        assert!(matches!(
            store.remove_image("a"),
            Err(ImageStoreError::Busy { live: 1, .. })
        ));
        store.release_view(&h);
        store.remove_image("a").unwrap();
        assert_eq!(store.list_images().unwrap().len(), 1);
        assert!(matches!(
            store.remove_image("a"),
            Err(ImageStoreError::UnknownReference(_))
        ));
        assert!(store.check_consistency().unwrap().is_empty());
    }

    #[test]
    fn corrupt_artifact_is_refused() {
        let mut store = SharedStore::new(MemBackend::new());
        let m = store.migrate_image(&image("a", "1"), 0).unwrap();
        let path = artifact_path(m.image.digest());
        let mut bytes = store.backend().read(&path).unwrap();
        bytes[20] ^= 1;
        store.backend().poke(&path, bytes);
        assert!(store
            .mount_view(
                &m.image,
                UpperLayer::new(),
                Identity::new(0, 0),
                MountOwner::default()
            )
            .is_err());
        assert_eq!(store.check_consistency().unwrap().len(), 1);
    }

    #[test]
    fn watcher_reclaims_orphans() {
        let mut store = SharedStore::new(MemBackend::new());
        assert!(store.watcher_tick(|_| true).reclaimed.is_empty());
        let img = store.migrate_image(&image("a", "1"), 0).unwrap().image;
        for step in 0..5 {
            let owner = MountOwner {
                job: 7,
                step,
                node: 0,
            };
            store
                .mount_view(&img, UpperLayer::new(), Identity::new(1, 1), owner)
                .unwrap();
        }
        let report = store.watcher_tick(|o| o.step >= 3);
        assert_eq!(report.reclaimed.len(), 2);
        assert_eq!(store.live_mounts().len(), 3);
    }

    #[test]
    fn plain_tree_costs_two_ops_per_open() {
        let rec = Recorder::new(MemBackend::new());
        let tree = flatten_layers(&image("a", "1").layers).tree;
        let view = PlainTreeView::unpack(&rec, "plain/a", &tree).unwrap();
        let before = rec.counters();
        assert_eq!(view.open("/etc/y").unwrap(), b"1");
        assert_eq!(rec.counters().since(&before).metadata_ops(), 2);
    }
}
