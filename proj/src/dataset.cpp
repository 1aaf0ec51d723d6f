#include "mergevit/dataset.hpp"

#include <algorithm>
#include <array>

#include "mergevit/rng.hpp"

namespace mergevit {

namespace {

// Rectangle heights as a fraction of the image side; width is 5/4 of the
// height. Four quadrants x three sizes = 12 distinguishable classes.
constexpr std::array<double, 3> kSizeFractions = {0.14, 0.25, 0.34};

struct Rect {
  int y0, x0, y1, x1;  // half-open
};

Rect class_rect(int cls, int image_size) {
  const int quadrant = cls % 4;
  const int size_idx = cls / 4;
  const int h = std::max(2, static_cast<int>(kSizeFractions[size_idx] * image_size));
  const int w = std::min(image_size / 2, h * 5 / 4);
  const int half = image_size / 2;
  const int qy = (quadrant / 2) * half;
  const int qx = (quadrant % 2) * half;
  const int y0 = qy + (half - h) / 2;
  const int x0 = qx + (half - w) / 2;
  return {y0, x0, y0 + h, x0 + w};
}

}  // namespace

int max_encodable_classes() { return 4 * static_cast<int>(kSizeFractions.size()); }

Dataset generate_dataset(const SyntheticDatasetSpec& spec) {
  if (spec.image_size < 8) throw ConfigError("dataset: image_size must be >= 8");
  if (spec.channels < 1) throw ConfigError("dataset: channels must be >= 1");
  if (spec.samples_per_class < 1) throw ConfigError("dataset: samples_per_class must be >= 1");
  if (spec.num_classes < 2 || spec.num_classes > max_encodable_classes())
    throw ConfigError("dataset: num_classes must be in 2.." +
                      std::to_string(max_encodable_classes()) + ", got " +
                      std::to_string(spec.num_classes));

  Dataset ds;
  ds.spec = spec;
  const int n = spec.num_classes * spec.samples_per_class;
  ds.images.reserve(n);
  ds.labels.reserve(n);

  for (int cls = 0; cls < spec.num_classes; ++cls) {
    const Rect r = class_rect(cls, spec.image_size);
    for (int i = 0; i < spec.samples_per_class; ++i) {
      // per-item seed, so generation order never matters
      Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(cls) * 1000003u + i));
      TensorF img({spec.image_size, spec.image_size, spec.channels});
      for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 0.1));
      const float brightness = static_cast<float>(rng.uniform(0.85, 1.0));
      for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x)
          for (int c = 0; c < spec.channels; ++c)
            img.data[(static_cast<std::size_t>(y) * spec.image_size + x) * spec.channels + c] =
                brightness;
      ds.images.push_back(std::move(img));
      ds.labels.push_back(cls);
    }
  }

  // deterministic shuffle so batches mix classes
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng shuffle_rng(mix_seed(spec.seed, 0xda7a5e7ULL));
  std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
  Dataset shuffled;
  shuffled.spec = spec;
  shuffled.images.reserve(n);
  shuffled.labels.reserve(n);
  for (int idx : order) {
    shuffled.images.push_back(std::move(ds.images[idx]));
    shuffled.labels.push_back(ds.labels[idx]);
  }
  return shuffled;
}

}  // namespace mergevit
