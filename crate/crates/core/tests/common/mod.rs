#![allow(dead_code)]

use relpatch::fixture::{generate_task, planted, Planted, PlantedConfig, Task, TaskConfig};
use relpatch::prompt::{build_triplets, PromptBuilder, PromptPair, Style, Triplet, TripletConfig};

pub fn task() -> Task {
    generate_task(&TaskConfig::default())
}

pub fn triplets(task: &Task, n: usize) -> Vec<Triplet> {
    let cfg = TripletConfig {
        n,
        ..TripletConfig::default()
    };
    build_triplets(&task.queries, &task.corpus, &task.qrels, &cfg)
        .unwrap()
        .triplets
}

pub struct Bench {
    pub planted: Planted,
    pub task: Task,
    pub triplets: Vec<Triplet>,
}

impl Bench {
    pub fn new(cfg: &PlantedConfig, n: usize) -> Self {
        let task = task();
        let triplets = triplets(&task, n);
        Self {
            planted: planted(cfg).unwrap(),
            task,
            triplets,
        }
    }

    pub fn builder(&self) -> PromptBuilder<'_> {
        PromptBuilder::new(&self.planted.tokenizer, self.planted.template.clone()).unwrap()
    }

    pub fn pairs(&self, style: Style) -> Vec<PromptPair> {
        let b = self.builder();
        self.triplets.iter().map(|t| b.render(t, style).unwrap()).collect()
    }
}
