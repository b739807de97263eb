#pragma once

#include <string>

#include "garmentgen/errors.hpp"
#include "garmentgen/rng.hpp"
#include "garmentgen/tensor.hpp"

namespace ggen {

// Inference-time strengths for the two conditions. Zero means the condition's
// guidance term is off entirely.
struct GuidanceScales {
    double s_g = 2.5;
    double s_t = 7.5;

    void validate() const {
        if (!(s_g >= 0.0) || !(s_t >= 0.0))
            throw ConfigError("guidance scales must be finite and nonnegative");
    }
};

// Joint training-time condition-drop distribution over the four states
// (garment, text), (none, text), (garment, none), (none, none).
struct DropPolicy {
    double p_drop_garment_only = 0.05;
    double p_drop_text_only = 0.05;
    double p_drop_both = 0.05;

    void validate() const {
        auto ok = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!ok(p_drop_garment_only) || !ok(p_drop_text_only) || !ok(p_drop_both) ||
            p_drop_garment_only + p_drop_text_only + p_drop_both > 1.0)
            throw ConfigError("drop probabilities must lie in [0,1] and sum to at most 1");
    }
};

struct ConditionPair {
    bool garment_present = true;
    bool text_present = true;
};

enum class GuidanceMode { Single, Independent, Joint, StrictEq5 };

inline GuidanceMode guidance_mode_from_string(const std::string& s) {
    if (s == "single") return GuidanceMode::Single;
    if (s == "independent") return GuidanceMode::Independent;
    if (s == "joint") return GuidanceMode::Joint;
    if (s == "strict-eq5") return GuidanceMode::StrictEq5;
    throw ConfigError("unknown guidance mode: " + s);
}

inline const char* guidance_mode_name(GuidanceMode m) {
    switch (m) {
        case GuidanceMode::Single: return "single";
        case GuidanceMode::Independent: return "independent";
        case GuidanceMode::Joint: return "joint";
        case GuidanceMode::StrictEq5: return "strict-eq5";
    }
    return "?";
}

// One uniform draw partitioned into four intervals, so a fixed rng stream
// always yields the same drop pattern regardless of policy evaluation order.
inline ConditionPair sample_condition_mask(SeededRng& rng, const DropPolicy& policy) {
    policy.validate();
    const double u = rng.uniform();
    ConditionPair pair;
    if (u < policy.p_drop_garment_only) {
        pair.garment_present = false;
    } else if (u < policy.p_drop_garment_only + policy.p_drop_text_only) {
        pair.text_present = false;
    } else if (u < policy.p_drop_garment_only + policy.p_drop_text_only + policy.p_drop_both) {
        pair.garment_present = false;
        pair.text_present = false;
    }
    return pair;
}

// Classic single-condition guidance: uncond + s * (cond - uncond).
template <typename T>
TensorT<T> cfg_single(const TensorT<T>& eps_uncond, const TensorT<T>& eps_cond, double s) {
    detail::check_same_shape(eps_uncond, eps_cond, "cfg_single");
    TensorT<T> out = TensorT<T>::zeros(eps_uncond.shape);
    const T sv = static_cast<T>(s);
    for (size_t i = 0; i < out.data->size(); ++i)
        (*out.data)[i] = (*eps_uncond.data)[i] + sv * ((*eps_cond.data)[i] - (*eps_uncond.data)[i]);
    return out;
}

// Two-condition guidance with each condition's delta taken against the fully
// unconditional prediction. Each scale multiplies the delta of its own
// condition; set strict_as_printed to reproduce the swapped assignment some
// write-ups use (s_g on the text delta, s_t on the garment delta).
template <typename T>
TensorT<T> cfg_independent(const TensorT<T>& eps_00, const TensorT<T>& eps_0T,
                           const TensorT<T>& eps_G0, const GuidanceScales& scales,
                           bool strict_as_printed = false) {
    detail::check_same_shape(eps_00, eps_0T, "cfg_independent");
    detail::check_same_shape(eps_00, eps_G0, "cfg_independent");
    const T st = static_cast<T>(strict_as_printed ? scales.s_g : scales.s_t);
    const T sg = static_cast<T>(strict_as_printed ? scales.s_t : scales.s_g);
    TensorT<T> out = TensorT<T>::zeros(eps_00.shape);
    for (size_t i = 0; i < out.data->size(); ++i) {
        const T base = (*eps_00.data)[i];
        (*out.data)[i] = base + st * ((*eps_0T.data)[i] - base) + sg * ((*eps_G0.data)[i] - base);
    }
    return out;
}

// Joint guidance: the text delta is taken relative to the garment-conditioned
// prediction, so the two terms telescope when both scales are 1.
template <typename T>
TensorT<T> cfg_joint(const TensorT<T>& eps_00, const TensorT<T>& eps_G0, const TensorT<T>& eps_GT,
                     const GuidanceScales& scales) {
    detail::check_same_shape(eps_00, eps_G0, "cfg_joint");
    detail::check_same_shape(eps_00, eps_GT, "cfg_joint");
    const T sg = static_cast<T>(scales.s_g);
    const T st = static_cast<T>(scales.s_t);
    TensorT<T> out = TensorT<T>::zeros(eps_00.shape);
    for (size_t i = 0; i < out.data->size(); ++i) {
        const T base = (*eps_00.data)[i];
        const T g0 = (*eps_G0.data)[i];
        (*out.data)[i] = base + sg * (g0 - base) + st * ((*eps_GT.data)[i] - g0);
    }
    return out;
}

}  // namespace ggen
