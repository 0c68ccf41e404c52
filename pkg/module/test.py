import torch
import torch.nn.functional as F



class Tester:
    def __init__(self, model, dataset, batch_size=1000):

        self.model = model
        self.dataset = dataset
        self.batch_size = batch_size


    def evaluate(self, training=False):
        """Mean NLL and accuracy over the whole dataset.

        ``training=False`` is the evaluation mode; for batch norm it uses the
        running statistics, which is the "eval" curve of a BN network.
        """
        tot_loss, correct = 0.0, 0
        n = len(self.dataset)

        with torch.no_grad():
            for start in range(0, n, self.batch_size):
                images = self.dataset.images[start:start + self.batch_size]
                labels = self.dataset.labels[start:start + self.batch_size]

                out = self.model(images.to(self.model.input_mean.dtype), training=training, update_running=False)
                tot_loss += F.nll_loss(out, labels, reduction='sum').item()
                correct += (out.argmax(dim=1) == labels).sum().item()

        return tot_loss / n, correct / n


    def test(self):
        loss, accuracy = self.evaluate()

        print('Test Results')
        print(f"  >> Test Loss: {loss:.4f}")
        print(f"  >> Test Acc : {accuracy:.4f}")
        return loss, accuracy
