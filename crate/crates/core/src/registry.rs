//! Global class universe and each client's class subset.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// The ordered global classes and, per client, the sorted global indices it
/// holds labels for. A client's head column `j` is its `j`-th class in this
/// sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRegistry", into = "RawRegistry")]
pub struct ClassRegistry {
    names: Vec<String>,
    client_classes: Vec<Vec<usize>>,
    holders: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawRegistry {
    global_classes: Vec<String>,
    client_classes: Vec<Vec<usize>>,
}

impl TryFrom<RawRegistry> for ClassRegistry {
    type Error = crate::error::Error;

    fn try_from(raw: RawRegistry) -> Result<Self> {
        ClassRegistry::new(raw.global_classes, raw.client_classes)
    }
}

impl From<ClassRegistry> for RawRegistry {
    fn from(reg: ClassRegistry) -> Self {
        RawRegistry {
            global_classes: reg.names,
            client_classes: reg.client_classes,
        }
    }
}

/// Partition of the classes by how many clients hold them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingProfile {
    pub shared_by_all: Vec<usize>,
    pub partially_shared: Vec<usize>,
    pub unique: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGroup {
    All,
    SharedByAll,
    PartiallyShared,
    Unique,
}

impl ClassGroup {
    pub const ALL: [ClassGroup; 4] = [
        ClassGroup::All,
        ClassGroup::SharedByAll,
        ClassGroup::PartiallyShared,
        ClassGroup::Unique,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassGroup::All => "all",
            ClassGroup::SharedByAll => "shared_by_all",
            ClassGroup::PartiallyShared => "partially_shared",
            ClassGroup::Unique => "unique",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl SharingProfile {
    pub fn group(&self, group: ClassGroup, num_classes: usize) -> Vec<usize> {
        match group {
            ClassGroup::All => (0..num_classes).collect(),
            ClassGroup::SharedByAll => self.shared_by_all.clone(),
            ClassGroup::PartiallyShared => self.partially_shared.clone(),
            ClassGroup::Unique => self.unique.clone(),
        }
    }
}

impl ClassRegistry {
    /// Validates and normalizes (sorts) the client class lists.
    pub fn new(names: Vec<String>, client_classes: Vec<Vec<usize>>) -> Result<Self> {
        let m = names.len();
        if m == 0 {
            return config("the class universe is empty");
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return config(format!("class name `{name}` appears twice"));
            }
        }
        if client_classes.is_empty() {
            return config("at least one client is required");
        }
        let mut holders = vec![Vec::new(); m];
        let mut sorted = Vec::with_capacity(client_classes.len());
        for (k, classes) in client_classes.into_iter().enumerate() {
            if classes.is_empty() {
                return config(format!("client {k} holds no classes"));
            }
            let mut classes = classes;
            classes.sort_unstable();
            for w in classes.windows(2) {
                if w[0] == w[1] {
                    return config(format!("client {k} lists class {} twice", w[0]));
                }
            }
            if let Some(&c) = classes.iter().find(|&&c| c >= m) {
                return config(format!("client {k} lists class {c}, but only {m} classes exist"));
            }
            for &c in &classes {
                holders[c].push(k);
            }
            sorted.push(classes);
        }
        if let Some(c) = holders.iter().position(|h| h.is_empty()) {
            return config(format!(
                "class {c} (`{}`) is held by no client; the client subsets must cover every class",
                names[c]
            ));
        }
        Ok(Self {
            names,
            client_classes: sorted,
            holders,
        })
    }

    /// Registry with generated class names `c0, c1, …`.
    pub fn from_indices(num_classes: usize, client_classes: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(default_class_names(num_classes), client_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn num_clients(&self) -> usize {
        self.client_classes.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `C_k`, sorted by global index.
    pub fn client_classes(&self, k: usize) -> Result<&[usize]> {
        self.client_classes
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| crate::error::Error::Config(format!("client {k} out of range")))
    }

    pub fn all_client_classes(&self) -> &[Vec<usize>] {
        &self.client_classes
    }

    /// Clients holding class `c`, in index order.
    pub fn clients_with_class(&self, c: usize) -> Result<&[usize]> {
        self.holders.get(c).map(Vec::as_slice).ok_or_else(|| {
            crate::error::Error::Config(format!("class {c} out of range for {} classes", self.num_classes()))
        })
    }

    pub fn local_to_global(&self, k: usize, local_col: usize) -> Result<usize> {
        let classes = self.client_classes(k)?;
        classes.get(local_col).copied().ok_or_else(|| {
            crate::error::Error::Config(format!(
                "local column {local_col} out of range for client {k} with {} classes",
                classes.len()
            ))
        })
    }

    /// Local column of class `c` at client `k`, or `None` when `c ∉ C_k`.
    pub fn global_to_local(&self, k: usize, c: usize) -> Result<Option<usize>> {
        let classes = self.client_classes(k)?;
        if c >= self.num_classes() {
            return config(format!("class {c} out of range for {} classes", self.num_classes()));
        }
        Ok(classes.binary_search(&c).ok())
    }

    pub fn sharing_profile(&self) -> SharingProfile {
        let k = self.num_clients();
        let mut profile = SharingProfile::default();
        for (c, holders) in self.holders.iter().enumerate() {
            let kc = holders.len();
            if kc == k {
                profile.shared_by_all.push(c);
            } else if kc == 1 {
                profile.unique.push(c);
            } else {
                profile.partially_shared.push(c);
            }
        }
        profile
    }

    /// True when every client holds every class.
    pub fn is_homogeneous(&self) -> bool {
        self.client_classes.iter().all(|c| c.len() == self.num_classes())
    }
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|c| format!("c{c}")).collect()
}
