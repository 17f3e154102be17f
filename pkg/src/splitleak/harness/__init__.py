from .config import ConfigError, ExperimentConfig, load_config, parse_defense
from .corpus import CorpusError, bundled_corpus_path, load_corpus
from .suites import (Workspace, attack_rouge, fit_linear, prepare, protected_rows, run_attack_suite,
                     run_bypass_study, run_cell, run_defense_grid, run_paf_study, run_q1_ablation,
                     run_timing, summarize)

__all__ = [
    "ConfigError", "CorpusError", "ExperimentConfig", "Workspace", "attack_rouge",
    "bundled_corpus_path", "fit_linear", "load_config", "load_corpus", "parse_defense", "prepare",
    "protected_rows", "run_attack_suite", "run_bypass_study", "run_cell", "run_defense_grid",
    "run_paf_study", "run_q1_ablation", "run_timing", "summarize",
]
