// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>

#include "freeinsert/backend.hpp"

namespace freeinsert {

/// CPU-only stand-ins for the learned components. Every model is a fixed,
/// seeded function of its inputs, so tests can assert exact values.

struct ToyDenoiserOptions {
    int hidden = 8;
    /// Scales the output projection; keeps the map contractive for inversion.
    float gain = 1.0f;
};

/// Catalog: spatial "up.0.res.0", "up.0.res.1" (hidden x h x w) and attention
/// "up.0.attn.0", "up.1.attn.0" (tokens x hidden). A latent_shape with zero
/// height/width publishes dynamic (-1) spatial dimensions.
std::unique_ptr<DenoiserBackend> make_toy_denoiser(std::uint64_t seed, Shape3 latent_shape,
                                                   ToyDenoiserOptions options = {});

/// Average-pools (2p - 1) over scale x scale blocks into RGB + luma channels;
/// decodes by nearest upsampling. scale 1 makes it an exact round trip.
std::unique_ptr<VaeBackend> make_toy_vae(int scale_factor = 8, double round_trip_bound = -1.0);

/// Finishes sampling with its own toy denoiser.
std::unique_ptr<Refiner> make_toy_refiner(std::uint64_t seed, int latent_channels = 4);

std::unique_ptr<DepthEstimator> make_toy_depth_estimator();

/// "toy-clip": color histogram plus coarse color layout.
/// "toy-dino": gradient-orientation histograms on a 4x4 grid.
/// "toy-ip":   both concatenated; used for content/style embeddings.
std::unique_ptr<ImageEmbedder> make_toy_embedder(const std::string& id);

/// Unit-normalized multi-scale feature distance; zero iff the features agree.
std::unique_ptr<PerceptualDistance> make_toy_perceptual();

}  // namespace freeinsert
