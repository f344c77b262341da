use std::collections::BTreeMap;

use super::AgentError;
use crate::registry::{ArgValue, FunctionalCall, Registry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandlerResult {
    pub text: String,
    pub success: bool,
}

pub type Handler = Box<dyn Fn(&FunctionalCall) -> HandlerResult + Send + Sync>;

/// Handlers keyed by function name.
#[derive(Default)]
pub struct HandlerTable {
    handlers: BTreeMap<String, Handler>,
}

fn arg(call: &FunctionalCall, i: usize) -> String {
    match call.args.get(i) {
        Some(ArgValue::Str(s)) => s.clone(),
        Some(ArgValue::Int(n)) => n.to_string(),
        None => String::new(),
    }
}

fn ok(text: String) -> HandlerResult {
    HandlerResult {
        text,
        success: true,
    }
}

fn recycling_instructions(item: &str, category: &str) -> HandlerResult {
    match category {
        "plastic" => ok(format!("Recycle {item} as plastic: empty and rinse, remove caps, then place in the plastics bin.")),
        "electronics" => ok(format!(
            "Recycle {item} as electronics: remove any batteries and take it to an e-waste drop-off point, not a household bin."
        )),
        "paper" => ok(format!("Recycle {item} as paper: keep it dry, remove plastic windows, then place in the paper bin.")),
        other => HandlerResult { text: format!("No recycling stream for `{other}`."), success: false },
    }
}

impl HandlerTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, handler: Handler) {
        self.handlers.insert(name.to_string(), handler);
    }

    pub fn remove(&mut self, name: &str) -> Option<Handler> {
        self.handlers.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.handlers.contains_key(name)
    }

    /// Deterministic offline stand-ins for the ten demo functions. Each echoes
    /// its arguments into a canned confirmation.
    pub fn demo() -> Self {
        let mut t = Self::new();
        t.insert(
            "send_text_message",
            Box::new(|c| ok(format!("Text message sent to {}: {}", arg(c, 1), arg(c, 0)))),
        );
        t.insert(
            "send_email",
            Box::new(|c| {
                ok(format!(
                    "Email sent to {} with subject \"{}\": {}",
                    arg(c, 0),
                    arg(c, 1),
                    arg(c, 2)
                ))
            }),
        );
        t.insert(
            "google_search",
            Box::new(|c| {
                ok(format!(
                    "Search results for \"{}\" (offline mock).",
                    arg(c, 0)
                ))
            }),
        );
        t.insert(
            "amazon_purchase",
            Box::new(|c| {
                ok(format!(
                    "Amazon order placed for \"{}\" in {}.",
                    arg(c, 0),
                    arg(c, 1)
                ))
            }),
        );
        t.insert(
            "smart_recycle",
            Box::new(|c| recycling_instructions(&arg(c, 0), &arg(c, 1))),
        );
        t.insert(
            "lost_and_found",
            Box::new(|c| {
                ok(format!(
                    "Lost-and-found report filed for \"{}\": {}",
                    arg(c, 0),
                    arg(c, 1)
                ))
            }),
        );
        t.insert(
            "interior_design",
            Box::new(|c| {
                ok(format!(
                    "Design suggestions for the {}: {}.",
                    arg(c, 0),
                    arg(c, 1)
                ))
            }),
        );
        t.insert(
            "instacart_shopping",
            Box::new(|c| {
                let n = match c.args.get(1) {
                    Some(ArgValue::Int(n)) => *n,
                    _ => 0,
                };
                HandlerResult {
                    text: format!("Instacart order placed: {} x {}.", arg(c, 1), arg(c, 0)),
                    success: n > 0,
                }
            }),
        );
        t.insert(
            "doordash_order",
            Box::new(|c| {
                ok(format!(
                    "DoorDash order for \"{}\" will be delivered to {}.",
                    arg(c, 0),
                    arg(c, 1)
                ))
            }),
        );
        t.insert(
            "animal_care",
            Box::new(|c| ok(format!("Scheduled {} for your {}.", arg(c, 1), arg(c, 0)))),
        );
        t
    }

    /// Fails on the first registered function that lacks a handler.
    pub fn check_total(&self, registry: &Registry) -> Result<(), AgentError> {
        match registry.schemas().iter().find(|s| !self.contains(&s.name)) {
            Some(s) => Err(AgentError::NoHandler(s.name.clone())),
            None => Ok(()),
        }
    }
}

/// Runs the handler registered for the call's function.
pub fn dispatch(
    call: &FunctionalCall,
    handlers: &HandlerTable,
) -> Result<HandlerResult, AgentError> {
    let h = handlers
        .handlers
        .get(call.name())
        .ok_or_else(|| AgentError::NoHandler(call.name().to_string()))?;
    Ok(h(call))
}
