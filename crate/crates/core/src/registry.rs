//! Name-keyed registries for interchangeable strategies.
//!
//! Each family (attack models, partitioners, server update rules) keeps a
//! static table of constructors. The CLI and experiment config select an
//! entry by name at runtime.

use crate::error::{Error, Result};

pub struct Entry<F> {
    pub name: &'static str,
    pub summary: &'static str,
    pub build: F,
}

pub struct Registry<F: 'static> {
    family: &'static str,
    entries: &'static [Entry<F>],
}

impl<F: Copy> Registry<F> {
    pub const fn new(family: &'static str, entries: &'static [Entry<F>]) -> Self {
        Self { family, entries }
    }

    pub fn family(&self) -> &'static str {
        self.family
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn entries(&self) -> &'static [Entry<F>] {
        self.entries
    }

    pub fn lookup(&self, name: &str) -> Result<F> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.build)
            .ok_or_else(|| Error::UnknownStrategy {
                family: self.family,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> u32 {
        1
    }
    fn two() -> u32 {
        2
    }

    static NUMBERS: Registry<fn() -> u32> = Registry::new(
        "number",
        &[
            Entry { name: "one", summary: "1", build: one },
            Entry { name: "two", summary: "2", build: two },
        ],
    );

    #[test]
    fn lookup_by_name() {
        assert_eq!((NUMBERS.lookup("two").unwrap())(), 2);
        assert_eq!(NUMBERS.names(), vec!["one", "two"]);
    }

    #[test]
    fn unknown_name_lists_known() {
        let err = NUMBERS.lookup("three").err().unwrap().to_string();
        assert!(err.contains("unknown number 'three'"), "{err}");
        assert!(err.contains("one, two"), "{err}");
    }
}
