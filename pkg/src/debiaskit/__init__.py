"""Desk-scale gender-debiasing trainer and fairness audit toolkit."""

from .autodiff import Tensor, backward, cosine_similarity
from .cda import (AugmentedQuad, EntailmentPair, GenderLexicon, augment_pair,
                  augment_sentence, builtin_lexicon, load_lexicon)
from .data import (Batch, Corpus, generate_synthetic_corpus,
                   generate_synthetic_nli, ingest_nli_jsonl, make_batches)
from .encoder import (EncoderConfig, EncoderModel, Vocabulary, build_vocab,
                      encode, encode_texts, mlm_logits, tokenize, tokenize_pair)
from .metrics import (BiasNliResult, ClassifiedExample, CrowsItem, MetricReport,
                      SeatResult, StereoItem, bias_nli_scores, crows_driver,
                      crows_ss, icat_score, seat_statistic, stereoset_driver,
                      stereoset_scores, tpr_gaps, winobias_tpr)
from .objective import (LossBreakdown, ObjectiveConfig, alignment_loss,
                        combine_losses, contrastive_loss, mlm_loss, total_loss)
from .trainer import (Adam, FineTuneConfig, TrainConfig, TrainTrace,
                      fine_tune_classifier, load_checkpoint, mask_tokens,
                      save_checkpoint, train, train_probe)

__version__ = "0.1.0"
