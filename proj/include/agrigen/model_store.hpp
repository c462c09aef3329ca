#pragma once

#include <filesystem>

#include "agrigen/checkpoint.hpp"
#include "agrigen/nets.hpp"

namespace agrigen {

// Standalone checkpoints for the classifier and reward model. Same container
// format as the diffusion bundle.

inline void save_classifier(Classifier& cls, const std::filesystem::path& path,
                            nlohmann::json extra_meta = {}) {
    Checkpoint ck;
    ck.meta["kind"] = "classifier";
    ck.meta["tool_version"] = kToolVersion;
    ck.meta["channels"] = cls.cfg.channels;
    ck.meta["in_channels"] = cls.cfg.in_channels;
    ck.meta["num_classes"] = cls.cfg.num_classes;
    ck.meta["dropout"] = cls.cfg.dropout;
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    ck.pack_params(cls.params());
    ck.pack_buffers(cls.buffers());
    ck.save(path);
}

struct LoadedClassifier {
    Classifier model;
    nlohmann::json meta;
};

inline LoadedClassifier load_classifier(const std::filesystem::path& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta.value("kind", "") != "classifier")
        throw IoError("not a classifier checkpoint: " + path.string());
    ClassifierConfig cfg;
    cfg.channels = ck.meta.at("channels").get<std::vector<int>>();
    cfg.in_channels = ck.meta.at("in_channels").get<int>();
    cfg.num_classes = ck.meta.at("num_classes").get<int>();
    cfg.dropout = ck.meta.at("dropout").get<double>();
    LoadedClassifier out{Classifier(cfg, 0), ck.meta};
    ck.unpack_params(out.model.params());
    ck.unpack_buffers(out.model.buffers());
    return out;
}

inline void save_reward_model(RewardModel& rm, const std::filesystem::path& path,
                              nlohmann::json extra_meta = {}) {
    Checkpoint ck;
    ck.meta["kind"] = "reward";
    ck.meta["tool_version"] = kToolVersion;
    ck.meta["channels"] = rm.cfg.channels;
    ck.meta["in_channels"] = rm.cfg.in_channels;
    ck.meta["hidden"] = rm.cfg.hidden;
    ck.meta["dropout"] = rm.cfg.dropout;
    for (auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
    ck.pack_params(rm.params());
    ck.pack_buffers(rm.buffers());
    ck.save(path);
}

struct LoadedRewardModel {
    RewardModel model;
    nlohmann::json meta;
};

inline LoadedRewardModel load_reward_model(const std::filesystem::path& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.meta.value("kind", "") != "reward")
        throw IoError("not a reward-model checkpoint: " + path.string());
    RewardModelConfig cfg;
    cfg.channels = ck.meta.at("channels").get<std::vector<int>>();
    cfg.in_channels = ck.meta.at("in_channels").get<int>();
    cfg.hidden = ck.meta.at("hidden").get<int>();
    cfg.dropout = ck.meta.at("dropout").get<double>();
    LoadedRewardModel out{RewardModel(cfg, 0), ck.meta};
    ck.unpack_params(out.model.params());
    ck.unpack_buffers(out.model.buffers());
    return out;
}

} // namespace agrigen
