#include "normlab/attack.hpp"

namespace normlab {

MixedBatch compose_mixed_batch(const data::Dataset& primary, std::span<const int> primary_indices,
                               const data::Dataset& contaminant, const MixDatasetSpec& spec, std::mt19937& rng,
                               bool augment) {
    spec.validate();
    if (primary_indices.empty()) throw DataError("mixed batch needs at least one primary sample");
    if (spec.k > 0 && contaminant.n == 0) throw DataError("mixed batch contaminant source is empty");

    const int n_primary = static_cast<int>(primary_indices.size());
    const int n_contam = spec.contaminant_batch();
    const int total = n_primary + n_contam;

    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(total) * data::Dataset::kImageBytes);
    std::vector<int> labels(static_cast<std::size_t>(total));
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(total));

    auto primary_bytes = data::gather_bytes(primary, primary_indices);
    std::copy(primary_bytes.begin(), primary_bytes.end(), bytes.begin());
    for (int i = 0; i < n_primary; ++i) {
        labels[static_cast<std::size_t>(i)] = primary.labels[static_cast<std::size_t>(primary_indices[static_cast<std::size_t>(i)])];
        mask[static_cast<std::size_t>(i)] = 1;
    }
    if (n_contam > 0) {
        std::uniform_int_distribution<int> pick(0, contaminant.n - 1);
        for (int i = 0; i < n_contam; ++i) {
            int src = pick(rng);
            std::memcpy(bytes.data() + static_cast<std::size_t>(n_primary + i) * data::Dataset::kImageBytes,
                        contaminant.images.data() + static_cast<std::size_t>(src) * data::Dataset::kImageBytes,
                        data::Dataset::kImageBytes);
            labels[static_cast<std::size_t>(n_primary + i)] = -1;
            mask[static_cast<std::size_t>(n_primary + i)] = 0;
        }
    }

    // randomized placement within the batch
    std::vector<int> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::uint8_t> shuffled(bytes.size());
    std::vector<int> slabels(static_cast<std::size_t>(total));
    std::vector<std::uint8_t> smask(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        int src = order[static_cast<std::size_t>(i)];
        std::memcpy(shuffled.data() + static_cast<std::size_t>(i) * data::Dataset::kImageBytes,
                    bytes.data() + static_cast<std::size_t>(src) * data::Dataset::kImageBytes,
                    data::Dataset::kImageBytes);
        slabels[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(src)];
        smask[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(src)];
    }

    if (augment) data::augment_batch(shuffled, total, rng);

    MixedBatch out;
    out.images = data::normalize_batch(shuffled, total, primary.norm_mean, primary.norm_std);
    out.labels = std::move(slabels);
    out.loss_mask = std::move(smask);
    out.active = n_primary;
    return out;
}

}  // namespace normlab
