#pragma once

// Bundled experiment configs written out by `tdbench fixtures`.

#include <string_view>
#include <utility>
#include <vector>

namespace tdr {

struct FixtureConfig {
  std::string_view name;
  std::string_view text;
};

inline const std::vector<FixtureConfig>& bundled_fixtures() {
  static const std::vector<FixtureConfig> all{
      {"rmc-panel.ini", R"([dataset]
source = blobs2d
train = 400
val = 100
test = 100

[model]
bases = standard, adversarial
hidden = 16, 16
epochs = 10
adv_epsilon = 0.15
adv_steps = 10
adv_step_size = 0.03

[defense]
kinds = rmc
rmc_k = 32
rmc_epochs = 10
rmc_patience = 2
rmc_adv_steps = 10
rmc_adv_step_size = 0.03

[attack]
kinds = none, transfer, fpa, gmsa-avg, gmsa-min
epsilon = 0.15
steps = 10
step_size = 0.03
iterations = 2

[game]
points = 40

[seeds]
data = 0
attacker = 1
defender = 2

[output]
dir = out/rmc-panel
)"},
      {"dann-mnist.ini", R"([dataset]
source = mnist-lite
root = data
train = 2000
val = 500
test = 500

[model]
bases = standard
hidden = 128, 64
epochs = 20

[defense]
kinds = none, dann
dann_epochs = 20

[attack]
kinds = none, transfer, fpa, gmsa-avg
epsilon = 0.3
steps = 40
step_size = 0.01
loss = cross-entropy
iterations = 9

[output]
dir = out/dann-mnist
)"},
      {"dent-ordering.ini", R"([dataset]
source = mnist-lite
root = data
train = 2000
val = 500
test = 500

[model]
hidden = 128, 64
epochs = 20

[defense]
kinds = none, dent

[attack]
kinds = none, transfer
epsilon = 0.03
steps = 20
step_size = 0.005

[game]
rounds = 5
batch = 100
ordering = label-sorted

[output]
dir = out/dent-ordering
)"},
      {"urejectron.ini", R"([dataset]
source = mnist-lite
root = data
train = 2000
val = 500
test = 500

[model]
hidden = 128, 64
epochs = 20

[defense]
kinds = urejectron
urejectron_epochs = 10
urejectron_points = 101

[attack]
kinds = none, transfer
epsilon = 0.3
steps = 40
step_size = 0.01

[output]
dir = out/urejectron
)"},
      {"multi-run.ini", R"([dataset]
source = blobs2d
train = 400
val = 100
test = 200

[model]
hidden = 16, 16
epochs = 20

[defense]
kinds = rmc
rmc_k = 32
rmc_epochs = 10
rmc_patience = 2
rmc_adv_steps = 10
rmc_adv_step_size = 0.03

[attack]
kinds = none, transfer
epsilon = 0.15
steps = 10
step_size = 0.03

[game]
points = 200

[seeds]
data = 0
attacker = 1
defender = 2
repeat = 5

[output]
dir = out/multi-run
)"},
  };
  return all;
}

}  // namespace tdr
