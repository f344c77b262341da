use std::collections::HashMap;

use once_cell::sync::Lazy;
use serde::Deserialize;

use super::{Category, Color};

/// The bundled template table. Editing it changes every generated dataset,
/// so its `version` must be bumped alongside.
pub const TEMPLATE_SOURCE: &str = include_str!("../../data/templates.json");

#[derive(Clone, Debug, Deserialize)]
pub struct ColorText {
    pub name: String,
    pub zh: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, Deserialize)]
pub struct CategoryText {
    pub name: String,
    pub singular: String,
    pub plural: String,
    pub zh: String,
    pub measure: String,
    pub setting: String,
    pub setting_zh: String,
}

#[derive(Clone, Debug, Deserialize)]
pub struct CountWords {
    pub en: Vec<String>,
    pub zh: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Intent {
    pub option: String,
    pub en: Vec<String>,
    pub zh: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct FunctionTemplates {
    pub name: String,
    pub categories: Vec<Category>,
    pub args: Vec<String>,
    #[serde(default)]
    pub values: HashMap<Category, String>,
    pub intents: Vec<Intent>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct TemplateTable {
    pub version: u32,
    pub colors: Vec<ColorText>,
    pub categories: Vec<CategoryText>,
    pub counts: CountWords,
    pub phones: Vec<String>,
    pub emails: Vec<String>,
    pub addresses: Vec<String>,
    pub functions: Vec<FunctionTemplates>,
}

impl TemplateTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let t: TemplateTable = serde_json::from_str(text).map_err(|e| e.to_string())?;
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<(), String> {
        let colors: Vec<&str> = self.colors.iter().map(|c| c.name.as_str()).collect();
        if colors != Color::ALL.map(Color::name) {
            return Err(format!(
                "colors must be listed in catalog order, got {colors:?}"
            ));
        }
        let cats: Vec<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        if cats != Category::ALL.map(Category::name) {
            return Err(format!(
                "categories must be listed in catalog order, got {cats:?}"
            ));
        }
        if self.counts.en.len() != usize::from(super::MAX_COUNT)
            || self.counts.zh.len() != usize::from(super::MAX_COUNT)
        {
            return Err("one count word per count".into());
        }
        if self.phones.is_empty() || self.emails.is_empty() || self.addresses.is_empty() {
            return Err("contact lists must be non-empty".into());
        }
        for f in &self.functions {
            if f.categories.is_empty() || f.intents.is_empty() {
                return Err(format!("`{}` needs categories and intents", f.name));
            }
            if f.intents.iter().any(|i| i.en.is_empty() || i.zh.is_empty()) {
                return Err(format!("`{}` needs queries in both languages", f.name));
            }
        }
        Ok(())
    }

    pub fn category(&self, c: Category) -> &CategoryText {
        &self.categories[c.index()]
    }

    pub fn color(&self, c: Color) -> &ColorText {
        &self.colors[c.index()]
    }

    pub fn function(&self, name: &str) -> Option<&FunctionTemplates> {
        self.functions.iter().find(|f| f.name == name)
    }
}

static TABLE: Lazy<TemplateTable> =
    Lazy::new(|| TemplateTable::parse(TEMPLATE_SOURCE).expect("bundled template table is valid"));

pub fn templates() -> &'static TemplateTable {
    &TABLE
}
