"""Annealed multi-objective guidance for rectified discrete flows.

A library and CLI for steering categorical-sequence generation toward the
Pareto front of several objectives: tabular discrete-flow denoisers fit from
couplings, exact coupling rectification with total-correlation monitoring,
Tchebycheff-scalarized annealed Metropolis-Hastings sampling with locally
balanced proposals, and brute-force oracles that certify the chain's
invariance, convergence, coverage, and monotonicity properties on
enumerable spaces.
"""

from .errors import (AreuredError, ConfigError, DomainError, NumericalError,
                     ResourceError)
from .flows import (EmpiricalCoupling, ExactCoupling, FactorizedDenoiser,
                    PathSchedule, bridge_marginal_exact, bridge_sample,
                    euler_sample, kappa, kappa_vector, nll_eval)
from .objectives import (AnnealSchedule, Normalizer, Objective, ObjectiveSuite,
                         TabulatedSuite, anneal, guidance_weight,
                         log_guidance_weight, representability_weights,
                         sample_weight, suite_objective, tchebycheff,
                         uniform_weights)
from .oracle import (ExactKernel, ParetoFront, argmax_set, exact_kernel,
                     exact_target, hypervolume, pareto_front, tv_distance)
from .rectify import (CouplingRectifier, RectificationRound, TcEstimate,
                      conditional_tc_exact, conditional_tc_mc,
                      rectification_loop, rectify_empirical, rectify_exact,
                      rectify_multiplicative)
from .sampler import (ChainTrajectory, GuidedSampler, SamplerConfig, balance,
                      build_proposal, candidate_set, mh_step, reward_ratio,
                      run_chain, run_chains)
from .seqspace import (ENUMERATION_CAP, Vocabulary, all_states, decode, encode,
                       encode_batch, enumerate_states, n_states)

__version__ = "0.1.0"
