"""Grammar induction with scalar, neural and compound PCFGs."""
from .chart import Sentence, Tree, brute_force_logprob, inside_logprob, map_parse_compound, viterbi_parse
from .grammar import (GrammarParams, GrammarSpec, RuleLogProbs, compound_rule_logprobs,
                      neural_rule_logprobs, scalar_rule_logprobs)
from .model import PCFGModel
from .trainer import TrainConfig, train

__version__ = "0.1.0"
