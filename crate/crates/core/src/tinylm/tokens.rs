use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Role of a token, used to protect system prompts from eviction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Context,
    Prompt,
    Generated,
}

/// Reserved token ids of the synthetic vocabulary. Everything from
/// [`special::FIRST_FREE`] up is task content.
pub mod special {
    pub const PAD: u32 = 0;
    /// System-prompt marker at the head of every context.
    pub const SYS: u32 = 1;
    /// "Repeat the previous context"
    pub const REPEAT: u32 = 2;
    /// "... starting with"
    pub const START: u32 = 3;
    pub const COLON: u32 = 4;
    pub const QUERY: u32 = 5;
    pub const ANSWER: u32 = 6;
    pub const NEEDLE: u32 = 7;
    pub const SEP: u32 = 8;
    /// Alternative rendering of the repeat instruction ("reproduce").
    pub const REPRODUCE: u32 = 9;
    pub const NEWLINE: u32 = 10;
    pub const EOS: u32 = 11;
    pub const FIRST_FREE: u32 = 12;
}

/// Token ids with optional per-token roles.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<Vec<Role>>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens, roles: None }
    }

    pub fn with_role(tokens: Vec<u32>, role: Role) -> Self {
        let roles = vec![role; tokens.len()];
        Self {
            tokens,
            roles: Some(roles),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Roles, filling untagged sequences with `default`.
    pub fn roles_or(&self, default: Role) -> Vec<Role> {
        self.roles.clone().unwrap_or_else(|| vec![default; self.tokens.len()])
    }

    pub fn push(&mut self, token: u32, role: Role) {
        self.tokens.push(token);
        if let Some(r) = &mut self.roles {
            r.push(role);
        }
    }

    /// Concatenate, tagging untagged halves with `default`.
    pub fn concat(&self, other: &TokenSeq, default: Role) -> TokenSeq {
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        let roles = if self.roles.is_none() && other.roles.is_none() {
            None
        } else {
            let mut r = self.roles_or(default);
            r.extend(other.roles_or(default));
            Some(r)
        };
        TokenSeq { tokens, roles }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(r) = &self.roles {
            if r.len() != self.tokens.len() {
                return Err(contract("role tags do not match token count"));
            }
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(contract(format!("token {t} outside vocabulary of {vocab_size}")));
        }
        Ok(())
    }
}
