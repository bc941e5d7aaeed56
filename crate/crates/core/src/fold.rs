//! Case-folding profiles and canonical name keys.
//!
//! A [`FoldProfile`] decides when two names refer to the same directory entry
//! on a given flavor of file system. Four profiles are built in:
//!
//! * `sensitive`: identity, names match only bytewise.
//! * `ascii`: folds `A`-`Z` to `a`-`z` and nothing else.
//! * `simple-fold`: Unicode simple case folding (status C + S), 1:1 per code point.
//! * `full-fold`: Unicode full case folding (status C + F), which may expand.
//!
//! Tables are generated at build time from the pinned `CaseFolding` data file
//! and the Unicode version is exposed through [`FoldProfile::unicode_version`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

include!(concat!(env!("OUT_DIR"), "/fold_tables.rs"));

/// Identifier of a built-in fold profile.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileId {
    Sensitive,
    Ascii,
    SimpleFold,
    FullFold,
}

impl ProfileId {
    pub const ALL: [ProfileId; 4] = [
        ProfileId::Sensitive,
        ProfileId::Ascii,
        ProfileId::SimpleFold,
        ProfileId::FullFold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileId::Sensitive => "sensitive",
            ProfileId::Ascii => "ascii",
            ProfileId::SimpleFold => "simple-fold",
            ProfileId::FullFold => "full-fold",
        }
    }
}

impl fmt::Display for ProfileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileId {
    type Err = FoldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProfileId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| FoldError::UnknownProfile(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FoldError {
    #[error("invalid name {name:?}: {reason}")]
    InvalidName { name: String, reason: InvalidReason },
    #[error("unknown fold profile {0:?} (expected sensitive, ascii, simple-fold or full-fold)")]
    UnknownProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    Empty,
    Separator,
    Nul,
    IllFormed,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::Empty => "empty name",
            InvalidReason::Separator => "contains a path separator",
            InvalidReason::Nul => "contains a NUL byte",
            InvalidReason::IllFormed => "not well-formed UTF-8",
        })
    }
}

/// Folded (and optionally normalized) form of a name. Two names collide under
/// a profile when their keys are equal but the raw names are not.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey(Vec<u8>);

impl CanonicalKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        // Keys are built from `String`s only.
        std::str::from_utf8(&self.0).expect("canonical keys are UTF-8")
    }

    pub fn into_string(self) -> String {
        String::from_utf8(self.0).expect("canonical keys are UTF-8")
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for CanonicalKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

#[derive(Copy, Clone)]
enum Table {
    Identity,
    Ascii,
    Simple(&'static [(u32, u32)]),
    Full(&'static [(u32, &'static [u32])]),
}

/// A named case-folding rule set.
#[derive(Copy, Clone)]
pub struct FoldProfile {
    id: ProfileId,
    table: Table,
    normalize: bool,
}

impl fmt::Debug for FoldProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FoldProfile")
            .field("id", &self.id)
            .field("normalize", &self.normalize)
            .field("unicode_version", &UNICODE_VERSION)
            .field("entries", &self.table_len())
            .finish()
    }
}

impl PartialEq for FoldProfile {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.normalize == other.normalize
    }
}

impl Eq for FoldProfile {}

static BUILTIN: [FoldProfile; 4] = [
    FoldProfile {
        id: ProfileId::Sensitive,
        table: Table::Identity,
        normalize: false,
    },
    FoldProfile {
        id: ProfileId::Ascii,
        table: Table::Ascii,
        normalize: false,
    },
    FoldProfile {
        id: ProfileId::SimpleFold,
        table: Table::Simple(SIMPLE_FOLD),
        normalize: false,
    },
    FoldProfile {
        id: ProfileId::FullFold,
        table: Table::Full(FULL_FOLD),
        normalize: false,
    },
];

/// The four built-in profiles, with normalization off.
pub fn load_builtin_profiles() -> Vec<FoldProfile> {
    BUILTIN.to_vec()
}

/// Unicode version of the embedded fold tables.
pub fn unicode_version() -> &'static str {
    UNICODE_VERSION
}

impl FoldProfile {
    pub fn builtin(id: ProfileId) -> FoldProfile {
        BUILTIN[id as usize]
    }

    pub fn sensitive() -> FoldProfile {
        Self::builtin(ProfileId::Sensitive)
    }

    pub fn ascii() -> FoldProfile {
        Self::builtin(ProfileId::Ascii)
    }

    pub fn simple_fold() -> FoldProfile {
        Self::builtin(ProfileId::SimpleFold)
    }

    pub fn full_fold() -> FoldProfile {
        Self::builtin(ProfileId::FullFold)
    }

    /// Turns canonical-equivalence handling on or off.
    pub fn with_normalization(mut self, normalize: bool) -> FoldProfile {
        self.normalize = normalize;
        self
    }

    pub fn id(&self) -> ProfileId {
        self.id
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn unicode_version(&self) -> &'static str {
        UNICODE_VERSION
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.table, Table::Identity) && !self.normalize
    }

    fn table_len(&self) -> usize {
        match self.table {
            Table::Identity => 0,
            Table::Ascii => 26,
            Table::Simple(t) => t.len(),
            Table::Full(t) => t.len(),
        }
    }

    /// The table entry for `c`, or `None` when `c` folds to itself.
    pub fn mapping(&self, c: char) -> Option<Vec<char>> {
        let cp = c as u32;
        match self.table {
            Table::Identity => None,
            Table::Ascii => c.is_ascii_uppercase().then(|| vec![c.to_ascii_lowercase()]),
            Table::Simple(t) => t
                .binary_search_by_key(&cp, |&(k, _)| k)
                .ok()
                .map(|i| vec![char::from_u32(t[i].1).expect("table holds scalar values")]),
            Table::Full(t) => t.binary_search_by_key(&cp, |&(k, _)| k).ok().map(|i| {
                t[i].1
                    .iter()
                    .map(|&m| char::from_u32(m).expect("table holds scalar values"))
                    .collect()
            }),
        }
    }

    fn push_folded(&self, c: char, out: &mut String) {
        match self.table {
            Table::Identity => out.push(c),
            Table::Ascii => out.push(c.to_ascii_lowercase()),
            Table::Simple(t) => match t.binary_search_by_key(&(c as u32), |&(k, _)| k) {
                Ok(i) => out.push(char::from_u32(t[i].1).expect("scalar")),
                Err(_) => out.push(c),
            },
            Table::Full(t) => match t.binary_search_by_key(&(c as u32), |&(k, _)| k) {
                Ok(i) => out.extend(t[i].1.iter().map(|&m| char::from_u32(m).expect("scalar"))),
                Err(_) => out.push(c),
            },
        }
    }

    fn fold_chars<I: IntoIterator<Item = char>>(&self, chars: I) -> String {
        let mut out = String::new();
        for c in chars {
            self.push_folded(c, &mut out);
        }
        out
    }

    /// Folds arbitrary text without validating it as a single name.
    pub fn fold_str(&self, s: &str) -> String {
        if !self.normalize {
            return self.fold_chars(s.chars());
        }
        // Canonical caseless form: decompose, fold, decompose again.
        let folded = self.fold_chars(s.nfd());
        folded.nfd().collect()
    }

    /// Canonical key of a single path component.
    pub fn fold_name(&self, name: &str) -> Result<CanonicalKey, FoldError> {
        validate_name(name)?;
        Ok(CanonicalKey(self.fold_str(name).into_bytes()))
    }

    /// Like [`fold_name`](Self::fold_name) for raw bytes; ill-formed UTF-8 is rejected.
    pub fn fold_bytes(&self, raw: &[u8]) -> Result<CanonicalKey, FoldError> {
        let name = std::str::from_utf8(raw).map_err(|_| FoldError::InvalidName {
            name: String::from_utf8_lossy(raw).into_owned(),
            reason: InvalidReason::IllFormed,
        })?;
        self.fold_name(name)
    }

    /// True iff the names fold to the same key but differ bytewise.
    pub fn names_collide(&self, a: &str, b: &str) -> Result<bool, FoldError> {
        let ka = self.fold_name(a)?;
        let kb = self.fold_name(b)?;
        Ok(ka == kb && a != b)
    }
}

/// Rejects names that can never be a single directory entry.
pub fn validate_name(name: &str) -> Result<(), FoldError> {
    let reason = if name.is_empty() {
        Some(InvalidReason::Empty)
    } else if name.contains('/') {
        Some(InvalidReason::Separator)
    } else if name.contains('\0') {
        Some(InvalidReason::Nul)
    } else {
        None
    };
    match reason {
        Some(reason) => Err(FoldError::InvalidName {
            name: name.to_string(),
            reason,
        }),
        None => Ok(()),
    }
}

pub fn fold_name(name: &str, profile: &FoldProfile) -> Result<CanonicalKey, FoldError> {
    profile.fold_name(name)
}

pub fn names_collide(a: &str, b: &str, profile: &FoldProfile) -> Result<bool, FoldError> {
    profile.names_collide(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KELVIN: &str = "temp_200\u{212A}";

    fn key(name: &str, p: FoldProfile) -> CanonicalKey {
        p.fold_name(name).unwrap()
    }

    #[test]
    fn kelvin_sign_folds_under_unicode_profiles_only() {
        assert_eq!(
            key(KELVIN, FoldProfile::simple_fold()),
            key("temp_200k", FoldProfile::simple_fold())
        );
        assert_eq!(
            key(KELVIN, FoldProfile::full_fold()),
            key("temp_200k", FoldProfile::full_fold())
        );
        assert_ne!(
            key(KELVIN, FoldProfile::ascii()),
            key("temp_200k", FoldProfile::ascii())
        );
    }

    #[test]
    fn sharp_s_expands_only_under_full_fold() {
        let full = FoldProfile::full_fold();
        assert_eq!(key("floß", full), key("FLOSS", full));
        assert_eq!(key("floß", full), key("floss", full));
        assert!(!FoldProfile::simple_fold().names_collide("floß", "FLOSS").unwrap());
        assert!(full.names_collide("floß", "FLOSS").unwrap());
    }

    #[test]
    fn sensitive_is_identity() {
        let p = FoldProfile::sensitive();
        assert_eq!(key("abc", p).as_bytes(), b"abc");
        assert_ne!(key("abc", p), key("ABC", p));
    }

    #[test]
    fn identical_names_never_collide() {
        assert!(FoldProfile::ascii().names_collide("foo", "FOO").unwrap());
        assert!(!FoldProfile::ascii().names_collide("foo", "foo").unwrap());
    }

    #[test]
    fn invalid_names_are_rejected() {
        let p = FoldProfile::full_fold();
        for (name, reason) in [
            ("", InvalidReason::Empty),
            ("a/b", InvalidReason::Separator),
            ("a\0b", InvalidReason::Nul),
        ] {
            match p.fold_name(name) {
                Err(FoldError::InvalidName { reason: r, .. }) => assert_eq!(r, reason),
                other => panic!("{name:?}: {other:?}"),
            }
        }
        assert!(matches!(
            p.fold_bytes(b"ab\xffcd"),
            Err(FoldError::InvalidName {
                reason: InvalidReason::IllFormed,
                ..
            })
        ));
    }

    #[test]
    fn builtin_set_and_entries() {
        let ids: Vec<_> = load_builtin_profiles().iter().map(|p| p.id()).collect();
        assert_eq!(ids, ProfileId::ALL.to_vec());
        assert!(load_builtin_profiles().iter().all(|p| !p.normalize()));
        assert_eq!(
            FoldProfile::simple_fold().mapping('\u{212A}'),
            Some(vec!['k'])
        );
        assert_eq!(FoldProfile::full_fold().mapping('ß'), Some(vec!['s', 's']));
        assert_eq!(FoldProfile::simple_fold().mapping('ß'), None);
        assert_eq!(FoldProfile::ascii().mapping('\u{212A}'), None);
        assert_eq!(unicode_version(), "13.0.0");
    }

    #[test]
    fn profile_ids_round_trip() {
        for id in ProfileId::ALL {
            assert_eq!(id.as_str().parse::<ProfileId>().unwrap(), id);
        }
        assert!("turkish".parse::<ProfileId>().is_err());
    }

    #[test]
    fn turkic_mappings_are_not_applied() {
        // Locale-free: dotted capital I uses the default full mapping.
        let full = FoldProfile::full_fold();
        assert_eq!(full.fold_str("\u{130}"), "i\u{307}");
        assert_eq!(full.fold_str("I"), "i");
    }

    #[test]
    fn normalization_is_opt_in() {
        let composed = "caf\u{e9}";
        let decomposed = "cafe\u{301}";
        let plain = FoldProfile::full_fold();
        assert!(!plain.names_collide(composed, decomposed).unwrap());
        let norm = plain.with_normalization(true);
        assert!(norm.names_collide(composed, decomposed).unwrap());
        assert!(norm.names_collide("CAF\u{c9}", decomposed).unwrap());
    }

    #[test]
    fn folding_every_code_point_is_idempotent() {
        for p in load_builtin_profiles() {
            for norm in [false, true] {
                let p = p.with_normalization(norm);
                for cp in 0..=0x10FFFFu32 {
                    let Some(c) = char::from_u32(cp) else { continue };
                    let once = p.fold_str(c.encode_utf8(&mut [0; 4]));
                    let twice = p.fold_str(&once);
                    assert_eq!(once, twice, "{:?} U+{cp:04X}", p.id());
                }
            }
        }
    }

    fn name_strategy() -> impl Strategy<Value = String> {
        let alphabet = prop::sample::select(vec![
            'a', 'A', 'k', 'K', '\u{212A}', 's', 'S', 'ß', '\u{1E9E}', 'é', 'É', '\u{301}', 'σ',
            'Σ', 'ς', 'ﬃ', 'İ', 'i', '_', '1',
        ]);
        prop::collection::vec(alphabet, 1..6).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn idempotent(s in name_strategy(), norm in any::<bool>()) {
            for p in load_builtin_profiles() {
                let p = p.with_normalization(norm);
                let once = p.fold_str(&s);
                prop_assert_eq!(p.fold_str(&once), once);
            }
        }

        #[test]
        fn profile_strength_is_monotone(a in name_strategy(), b in name_strategy()) {
            let ascii = FoldProfile::ascii().names_collide(&a, &b).unwrap();
            let simple = FoldProfile::simple_fold().names_collide(&a, &b).unwrap();
            let full = FoldProfile::full_fold().names_collide(&a, &b).unwrap();
            prop_assert!(!ascii || simple);
            prop_assert!(!simple || full);
            prop_assert!(!FoldProfile::sensitive().names_collide(&a, &b).unwrap());
        }

        #[test]
        fn fold_equality_is_an_equivalence(a in name_strategy(), b in name_strategy(), c in name_strategy()) {
            for p in load_builtin_profiles() {
                let (ka, kb, kc) = (key(&a, p), key(&b, p), key(&c, p));
                prop_assert_eq!(&ka, &ka);
                prop_assert_eq!(ka == kb, kb == ka);
                if ka == kb && kb == kc {
                    prop_assert_eq!(&ka, &kc);
                }
            }
        }

        #[test]
        fn ascii_matches_lowercase_oracle(a in "[a-zA-Z0-9._-]{1,8}", b in "[a-zA-Z0-9._-]{1,8}") {
            let oracle = a.eq_ignore_ascii_case(&b) && a != b;
            prop_assert_eq!(FoldProfile::ascii().names_collide(&a, &b).unwrap(), oracle);
        }
    }
}
