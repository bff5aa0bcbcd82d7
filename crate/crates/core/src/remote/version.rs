//! Version ordering used to resolve `latest`.
//!
//! A version is split at its first `-` into a release part and an optional
//! pre-release part. Both are compared segment by segment (segments are
//! separated by `.` and, in the pre-release part, also by `-`): numeric
//! segments compare numerically and sort before non-numeric ones, others
//! compare bytewise, and a shorter list sorts first when it is a prefix of a
//! longer one. A version with a pre-release part sorts before the same
//! release without one. Remaining ties fall back to plain string order so the
//! ordering is total.

use std::cmp::Ordering;

fn is_numeric(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn compare_numeric(a: &str, b: &str) -> Ordering {
    let a = a.trim_start_matches('0');
    let b = b.trim_start_matches('0');
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

fn compare_segment(a: &str, b: &str) -> Ordering {
    match (is_numeric(a), is_numeric(b)) {
        (true, true) => compare_numeric(a, b),
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => a.cmp(b),
    }
}

fn compare_segments<'a>(a: impl Iterator<Item = &'a str>, b: impl Iterator<Item = &'a str>) -> Ordering {
    let mut a = a.peekable();
    let mut b = b.peekable();
    loop {
        match (a.next(), b.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => match compare_segment(x, y) {
                Ordering::Equal => continue,
                other => return other,
            },
        }
    }
}

/// Total order on version strings.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let (a_rel, a_pre) = split_pre(a);
    let (b_rel, b_pre) = split_pre(b);
    compare_segments(a_rel.split('.'), b_rel.split('.'))
        .then_with(|| match (a_pre, b_pre) {
            (None, None) => Ordering::Equal,
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (Some(x), Some(y)) => compare_segments(x.split(['.', '-']), y.split(['.', '-'])),
        })
        .then_with(|| a.cmp(b))
}

fn split_pre(v: &str) -> (&str, Option<&str>) {
    match v.split_once('-') {
        Some((rel, pre)) => (rel, Some(pre)),
        None => (v, None),
    }
}

/// The greatest version, ignoring the symbolic `latest`.
pub fn latest_of<'a>(versions: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    versions
        .into_iter()
        .filter(|v| *v != super::LATEST)
        .max_by(|a, b| compare_versions(a, b))
}
