//! Seeded random directory trees.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct TreeGenConfig {
    pub max_depth: usize,
    pub max_entries: usize,
    pub max_file_size: usize,
    pub symlinks: bool,
}

impl Default for TreeGenConfig {
    fn default() -> Self {
        TreeGenConfig {
            max_depth: 4,
            max_entries: 50,
            max_file_size: 64 * 1024,
            symlinks: true,
        }
    }
}

const NAME_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-";

fn random_name(rng: &mut impl Rng) -> String {
    loop {
        let len = rng.random_range(1..=10);
        let name: String = (0..len)
            .map(|_| NAME_CHARS[rng.random_range(0..NAME_CHARS.len())] as char)
            .collect();
        if name != "." && name != ".." {
            return name;
        }
    }
}

/// Populate `root` (which must exist) with a random tree. Returns the number
/// of entries created.
pub fn random_tree(rng: &mut impl Rng, root: &Path, config: TreeGenConfig) -> usize {
    let mut budget = rng.random_range(0..=config.max_entries);
    let total = budget;
    let mut shared_content: Vec<Vec<u8>> = Vec::new();
    fill_dir(rng, root, 1, &config, &mut budget, &mut shared_content);
    total - budget
}

fn fill_dir(
    rng: &mut impl Rng,
    dir: &Path,
    depth: usize,
    config: &TreeGenConfig,
    budget: &mut usize,
    shared: &mut Vec<Vec<u8>>,
) {
    let wanted = rng.random_range(0..=(*budget).min(12));
    for _ in 0..wanted {
        if *budget == 0 {
            return;
        }
        let path = dir.join(random_name(rng));
        if path.symlink_metadata().is_ok() {
            continue;
        }
        *budget -= 1;
        let roll = rng.random_range(0..100);
        if roll < 20 && depth < config.max_depth {
            fs::create_dir(&path).unwrap();
            fill_dir(rng, &path, depth + 1, config, budget, shared);
        } else if roll < 35 && config.symlinks {
            let target = match rng.random_range(0..3) {
                0 => random_name(rng),
                1 => format!("../{}", random_name(rng)),
                _ => format!("{}/{}", random_name(rng), random_name(rng)),
            };
            std::os::unix::fs::symlink(target, &path).unwrap();
        } else {
            let content = if !shared.is_empty() && rng.random_bool(0.2) {
                shared[rng.random_range(0..shared.len())].clone()
            } else {
                let size = match rng.random_range(0..10) {
                    0 => 0,
                    1..=6 => rng.random_range(0..512),
                    _ => rng.random_range(0..=config.max_file_size),
                };
                let mut buf = vec![0u8; size];
                rng.fill(&mut buf[..]);
                shared.push(buf.clone());
                buf
            };
            fs::write(&path, &content).unwrap();
            let mode = if rng.random_bool(0.3) { 0o755 } else { 0o644 };
            fs::set_permissions(&path, fs::Permissions::from_mode(mode)).unwrap();
        }
    }
}
