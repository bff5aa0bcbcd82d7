//! Canonical binary encoding of store objects.
//!
//! Every object starts with a one-byte kind tag. All integers are big-endian
//! and every variable-length field is length-prefixed:
//!
//! ```text
//! file   := 0x01 exec:u8 len:u64 content
//! tree   := 0x02 count:u32 entry*
//! entry  := name_len:u32 name kind:u8 body
//!           kind 0x01 (file)    body := exec:u8 id:[32]
//!           kind 0x02 (dir)     body := id:[32]
//!           kind 0x03 (symlink) body := target_len:u32 target
//! commit := 0x03 tree:[32] has_parent:u8 parent:[32]? timestamp:i64
//!           subject_len:u32 subject meta_count:u32 (key_len:u32 key val_len:u32 val)*
//! ```
//!
//! Tree entries are sorted by byte-wise name, metadata by byte-wise key.
//! Decoding rejects anything the encoder would not produce, so
//! `encode(decode(b)) == b` for every accepted `b`.
//!
//! File objects live on disk as their raw content (so checkouts can hardlink
//! them); the canonical header is rebuilt from the length and executable bit
//! whenever the id is computed.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use super::ObjectId;

const TAG_FILE: u8 = 0x01;
const TAG_TREE: u8 = 0x02;
const TAG_COMMIT: u8 = 0x03;

const ENTRY_FILE: u8 = 0x01;
const ENTRY_DIR: u8 = 0x02;
const ENTRY_SYMLINK: u8 = 0x03;

/// Header preceding the content of a file object in its canonical form.
pub fn file_header(executable: bool, len: u64) -> [u8; 10] {
    let mut header = [0u8; 10];
    header[0] = TAG_FILE;
    header[1] = executable as u8;
    header[2..].copy_from_slice(&len.to_be_bytes());
    header
}

/// Incremental hasher for file objects whose length is known up front.
pub struct FileHasher {
    hasher: Sha256,
    expected: u64,
    seen: u64,
}

impl FileHasher {
    pub fn new(executable: bool, len: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(file_header(executable, len));
        FileHasher {
            hasher,
            expected: len,
            seen: 0,
        }
    }

    pub fn update(&mut self, chunk: &[u8]) {
        self.seen += chunk.len() as u64;
        self.hasher.update(chunk);
    }

    /// `None` if the number of bytes fed differs from the declared length.
    pub fn finish(self) -> Option<ObjectId> {
        (self.seen == self.expected).then(|| ObjectId(self.hasher.finalize().into()))
    }
}

pub fn hash_bytes(bytes: &[u8]) -> ObjectId {
    ObjectId(Sha256::digest(bytes).into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(msg: impl Into<String>) -> DecodeError {
    DecodeError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryKind {
    File { id: ObjectId, executable: bool },
    Dir { id: ObjectId },
    Symlink { target: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEntry {
    pub name: Vec<u8>,
    pub kind: EntryKind,
}

/// Checks a single path component: non-empty, not `.`/`..`, no `/` or NUL.
pub fn valid_entry_name(name: &[u8]) -> bool {
    !name.is_empty() && name != b"." && name != b".." && !name.iter().any(|b| *b == b'/' || *b == 0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TreeObject {
    entries: Vec<TreeEntry>,
}

impl TreeObject {
    /// Builds a tree, sorting entries. Fails on invalid or duplicate names.
    pub fn new(mut entries: Vec<TreeEntry>) -> Result<Self, DecodeError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in entries.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(bad(format!(
                    "duplicate entry {:?}",
                    String::from_utf8_lossy(&pair[0].name)
                )));
            }
        }
        for entry in &entries {
            check_entry(entry)?;
        }
        Ok(TreeObject { entries })
    }

    pub fn entries(&self) -> &[TreeEntry] {
        &self.entries
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![TAG_TREE];
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for entry in &self.entries {
            put_bytes(&mut out, &entry.name);
            match &entry.kind {
                EntryKind::File { id, executable } => {
                    out.push(ENTRY_FILE);
                    out.push(*executable as u8);
                    out.extend_from_slice(id.as_bytes());
                }
                EntryKind::Dir { id } => {
                    out.push(ENTRY_DIR);
                    out.extend_from_slice(id.as_bytes());
                }
                EntryKind::Symlink { target } => {
                    out.push(ENTRY_SYMLINK);
                    put_bytes(&mut out, target);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.u8()? != TAG_TREE {
            return Err(bad("not a tree object"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.bytes()?.to_vec();
            let kind = match r.u8()? {
                ENTRY_FILE => {
                    let executable = r.flag()?;
                    EntryKind::File {
                        executable,
                        id: r.id()?,
                    }
                }
                ENTRY_DIR => EntryKind::Dir { id: r.id()? },
                ENTRY_SYMLINK => EntryKind::Symlink {
                    target: r.bytes()?.to_vec(),
                },
                other => return Err(bad(format!("unknown entry kind {other:#x}"))),
            };
            let entry = TreeEntry { name, kind };
            check_entry(&entry)?;
            if let Some(prev) = entries.last() {
                let prev: &TreeEntry = prev;
                if prev.name >= entry.name {
                    return Err(bad("tree entries are not strictly sorted"));
                }
            }
            entries.push(entry);
        }
        r.finish()?;
        Ok(TreeObject { entries })
    }

    pub fn id(&self) -> ObjectId {
        hash_bytes(&self.encode())
    }
}

fn check_entry(entry: &TreeEntry) -> Result<(), DecodeError> {
    if !valid_entry_name(&entry.name) {
        return Err(bad(format!(
            "invalid entry name {:?}",
            String::from_utf8_lossy(&entry.name)
        )));
    }
    if let EntryKind::Symlink { target } = &entry.kind {
        if target.is_empty() || target.contains(&0) {
            return Err(bad("invalid symlink target"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitObject {
    pub tree: ObjectId,
    pub parent: Option<ObjectId>,
    pub timestamp: i64,
    pub subject: String,
    pub metadata: BTreeMap<String, String>,
}

impl CommitObject {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![TAG_COMMIT];
        out.extend_from_slice(self.tree.as_bytes());
        match &self.parent {
            Some(parent) => {
                out.push(1);
                out.extend_from_slice(parent.as_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        put_bytes(&mut out, self.subject.as_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_be_bytes());
        for (key, value) in &self.metadata {
            put_bytes(&mut out, key.as_bytes());
            put_bytes(&mut out, value.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.u8()? != TAG_COMMIT {
            return Err(bad("not a commit object"));
        }
        let tree = r.id()?;
        let parent = if r.flag()? { Some(r.id()?) } else { None };
        let timestamp = i64::from_be_bytes(r.array()?);
        let subject = r.string()?;
        let count = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let key = r.string()?;
            let value = r.string()?;
            if last
                .as_ref()
                .is_some_and(|prev| prev.as_bytes() >= key.as_bytes())
            {
                return Err(bad("commit metadata keys are not strictly sorted"));
            }
            last = Some(key.clone());
            metadata.insert(key, value);
        }
        r.finish()?;
        Ok(CommitObject {
            tree,
            parent,
            timestamp,
            subject,
            metadata,
        })
    }

    pub fn id(&self) -> ObjectId {
        hash_bytes(&self.encode())
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { rest: bytes }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.rest.len() < n {
            return Err(bad("truncated object"));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked by take"))
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(bad(format!("invalid flag byte {other:#x}"))),
        }
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn id(&mut self) -> Result<ObjectId, DecodeError> {
        Ok(ObjectId(self.array()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let bytes = self.bytes()?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad("string field is not UTF-8"))
    }

    fn finish(self) -> Result<(), DecodeError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(bad("trailing bytes after object"))
        }
    }
}
