//! Selfish-mining pool (Eyal and Sirer's withholding strategy).
//!
//! The pool mines on its private branch and tracks its lead over the public
//! chain. New blocks are withheld; when the public chain catches up to a
//! lead of one the pool publishes and races; with a lead of two it
//! publishes everything and overrides the public block; with a larger lead
//! it reveals just enough to keep honest miners wasting work.

use std::collections::VecDeque;

use crate::ledger::Block;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AdversaryEvent {
    /// The pool found a block on its private tip.
    Mined(Block),
    /// A block from an honest miner reached the pool.
    PublicBlock { height: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdversaryAction {
    /// Release these blocks. `race` marks a release that merely ties the
    /// public chain, where the tie-break decides which branch honest miners
    /// extend.
    Publish { blocks: Vec<Block>, race: bool },
}

#[derive(Debug, Clone, Default)]
pub struct SelfishState {
    unpublished: VecDeque<Block>,
    private_height: u64,
    public_height: u64,
    racing: bool,
}

impl SelfishState {
    pub fn new(height: u64) -> Self {
        SelfishState {
            private_height: height,
            public_height: height,
            ..Default::default()
        }
    }

    /// Private blocks ahead of the public chain.
    pub fn lead(&self) -> u64 {
        self.private_height.saturating_sub(self.public_height)
    }

    pub fn withheld(&self) -> usize {
        self.unpublished.len()
    }

    pub fn racing(&self) -> bool {
        self.racing
    }

    pub fn step(&mut self, event: AdversaryEvent) -> Vec<AdversaryAction> {
        match event {
            AdversaryEvent::Mined(block) => {
                let prev_lead = self.lead();
                self.private_height = block.height();
                self.unpublished.push_back(block);
                if prev_lead == 0 && self.racing {
                    // Won the race outright: the new block settles it.
                    self.racing = false;
                    self.public_height = self.private_height;
                    return vec![AdversaryAction::Publish {
                        blocks: self.unpublished.drain(..).collect(),
                        race: false,
                    }];
                }
                Vec::new()
            }
            AdversaryEvent::PublicBlock { height } => {
                if height <= self.public_height {
                    return Vec::new();
                }
                self.public_height = height;
                self.racing = false;
                if height > self.private_height {
                    // Behind: abandon the private branch.
                    self.private_height = height;
                    self.unpublished.clear();
                    return Vec::new();
                }
                match self.private_height - height {
                    0 => {
                        self.racing = true;
                        vec![AdversaryAction::Publish {
                            blocks: self.unpublished.drain(..).collect(),
                            race: true,
                        }]
                    }
                    1 => {
                        self.public_height = self.private_height;
                        vec![AdversaryAction::Publish {
                            blocks: self.unpublished.drain(..).collect(),
                            race: false,
                        }]
                    }
                    _ => {
                        let mut blocks = Vec::new();
                        while self.unpublished.front().is_some_and(|b| b.height() <= height) {
                            blocks.push(self.unpublished.pop_front().expect("front exists"));
                        }
                        if blocks.is_empty() {
                            Vec::new()
                        } else {
                            vec![AdversaryAction::Publish { blocks, race: false }]
                        }
                    }
                }
            }
        }
    }
}
